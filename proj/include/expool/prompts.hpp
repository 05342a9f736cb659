#pragma once

#include <map>
#include <string>
#include <string_view>

namespace expool::prompts {

inline constexpr int kVersion = 1;

inline constexpr std::string_view kInsight =
    "Based on the following Bradley-Terry-Davison (BTD) probabilistic model results for "
    "multi-degradation image restoration tasks (Preference: {preference}), extracted key insights "
    "about the degradation removal order and recommendations:\n\n{combined_text}\n\n Your "
    "conclusion insight:";

inline constexpr std::string_view kDebateRole =
    "Your role is to act as the {role}, the theme is: `Is this a good enough degradation "
    "pattern?`. Which means you are good at dealing with information from yourself & other to "
    "think about the next appropriate action without executing it. Now is your thinking stage.\n"
    "\n"
    "Historical information(your current stage reasoning & the external tools result): "
    "{context}.\n"
    "\n"
    "You have access to external tools represented as Python function prototypes, which you may "
    "invoke to support your debate competition:\n"
    "- generate_groups(no parameter)\n"
    "- validate_current_group(traj_id: List[int]) # using to validate current unconvinced image "
    "degradation pattern(intra-group: within the same degradation pattern) by specified "
    "trajectories id(requirements: 1 unconvinced traj_id + 1~3 convinced traj_id, totally 3 "
    "traj_id specified id is maximum)\n"
    "- validate_other_group(traj_id: List[int]) # using to validate other unconvinced image "
    "degradation pattern(inter-group: between two degradation patterns) by specified trajectories "
    "id(requirements: 1 unconvinced traj_id + 1~3 convinced traj_id, totally 3 traj_id specified "
    "id is maximum))\n"
    "- finish(no parameter) # using when you think you have obtained the final answer\n"
    "\n"
    "Your response must strictly follow this format. It's forbidden to include any output beyond "
    "these two sections:\n"
    "Thought: [Your brief reasoning process must be less than 200 words, including problem "
    "analysis and analysis of the action to take on the next step.]\n"
    "Action: [The `Python function prototypes` you decide to take on the next step.]:";

inline constexpr std::string_view kDebateAction =
    "You want to ensure that all degradation patterns you raise are credible and accurate enough "
    "to withstand challenges in a debate competition. The theme is: `Is this a good enough "
    "degradation pattern?`\n"
    "\n"
    "Currently, there is an ongoing process defined as 'semantic clustering'.\n"
    "The goal of semantic clustering is to categorize degradation modes.\n"
    "The rules for semantic clustering are as follows:\n"
    "1. Within each degradation pattern category, the semantic representation of the degradation "
    "pattern text information must be as similar as possible.\n"
    "2. Between different degradation pattern categories, the semantic representation difference "
    "of the degradation pattern text information must be significant.\n"
    "3. Under the premise of satisfying rules 1 and 2, the tool ranking information of the `top "
    "three(If only two, then top2)` within each degradation pattern category must be as close as "
    "possible.\n"
    "4. Under the premise of satisfying rules 1 and 2, the tool ranking information of the `top "
    "three(If only two, then top2)` between different degradation pattern categories must be as "
    "distant as possible.\n"
    "5. The number of degradation pattern categories is not fixed, but must avoid redundancy and "
    "dissatisfaction of the point mentioned in 1-4.\n"
    "6. For uncertain trajectory information that cannot be confidently classified considering the "
    "semantic representation and ranking requirements, explicitly indicate which trajectories are "
    "uncertain and require further verification inside the XML label "
    "<unconvinced_info></unconvinced_info> or inside the <verify1></verify1>.\n"
    "\n"
    "You are provided with the current degradation pattern categories derived solely from textual "
    "information: {pattern_textual_context} \n"
    "Some categories contain trajectories with uncertain classification. Now, you will perform a "
    "further validation step using both the image information provided as: "
    "{pattern_image_context}\n"
    "\n"
    "You can provide two types of judgments:\n"
    "1. Positive: Confirm that the trajectory fits the degradation pattern category based on the "
    "image data.\n"
    "2. Negative: Determine that the trajectory does not fit the current degradation pattern "
    "category; instead, select a more appropriate degradation pattern category based on textual "
    "semantic similarity and specify that cross-category verification is needed.\n"
    "\n"
    "Finally, you need to keep the content inside <convinced_info></convinced_info> and (if they "
    "exist <unconvinced_info></unconvinced_info> <verify></verify> you need to keep them too) "
    "without removing any previous outputs and copy the previous output. For the current "
    "verification, should append behind that pattern inside the XML brace <verify_1></verify_1> "
    "with a number in sequence. Your output must strictly follow this format:\n"
    "<convinced_info>Degradation Pattern 1: The pure semantic representation of the degradation "
    "pattern text information is..., included trajectories are Traj1, Traj3..., reasons are...,"
    "</convinced_info><unconvinced_info>among these trajectories, the classification of Traj1..., "
    "are not fully convincing because..., need further verification</unconvinced_info>.<verify_1>"
    "After combined text and image validation, Traj3 indeed belongs to Degradation Pattern 1, "
    "because...</verify_1>";

inline constexpr std::string_view kProfileOperation =
    "You are an expert in planning and knowledge management, tasked with updating degradation "
    "patterns stored within a vector database. Your objective is to analyze a given set of \"new "
    "degradation patterns\" alongside the \"old degradation patterns\" currently in the database, "
    "and determine the precise atomic operations required to keep the database accurate and "
    "up-to-date.\n"
    "Specifically, for each new pattern, decide which of the following actions applies:\n"
    "\n"
    "- add: Introduce a completely new pattern to the database because it does not overlap with "
    "existing ones. Using this operation to balance accuracy and redundancy.\n"
    "- merge: Identify when an existing pattern fully subsumes a new pattern, in which case, "
    "retain the old pattern but enrich it with additional information from the new one.\n"
    "- replace: Apply when the new pattern subsumes an existing pattern, meaning the new "
    "pattern's semantics are broader or more accurate, and thus should replace the old pattern.\n"
    "\n"
    "You will receive a task description labeled that specifies the particular patterns to "
    "analyze. If you receive any feedback on your output, revise your operations accordingly "
    "while maintaining the same output format.\n"
    "Current task description:\n"
    "Degradation type: {degradation_type}\n"
    "New degradation patterns: {new_pattern}\n"
    "\n"
    "Existing degradation patterns in DB: {pattern_db}\n"
    "Previous plans: {history_plan}\n"
    "Previous feedback: {history_feedback}\n"
    "\n"
    "Your output must be formatted as a Python list of strings, where each string represents a "
    "single atomic operation; it's forbidden to do an operation on the same old degradation "
    "pattern. If the operation is unsatisfactory on the degradation patterns, change to another "
    "degradation pattern.\n"
    "The format for each element is:\n"
    "\"<new pattern digit only> | <action> | <existing pattern digit only(optional)>\"\n"
    "Include the existing pattern only when relevant (for merge or replace actions). For add "
    "actions, the existing pattern field can be omitted.\n"
    "\n"
    "Example output:\n"
    "[\"1 | merge | 2\", \"2 | add\"]";

inline constexpr std::string_view kDescribe =
    "Image: {image}\n"
    "The image is degraded by: {degradation_type}.\n"
    "Describe the visual pattern of this degradation in one short sentence. Reply with the "
    "sentence only.";

inline constexpr std::string_view kRefine =
    "Image: {image}\n"
    "Degradation type: {degradation_type}\n"
    "Candidate degradation pattern descriptions:\n{candidates}\n"
    "Pick the description that matches the image best. Reply with a single line of the form "
    "`Choice: <number>`.";

// Substitutes every {name} placeholder present in `values`. Placeholders without a
// value are left untouched.
std::string render(std::string_view tmpl, const std::map<std::string, std::string>& values);

}  // namespace expool::prompts
