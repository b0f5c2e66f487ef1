//! Instruction template banks. `<name>` marks the concept-name slot.

pub const NAME_SLOT: &str = "<name>";

pub const OCT_SYSTEM_PROMPT: &str = "As an evaluation expert, your task is to verify whether the object identified as <name> in the first image is also present in the second image. Answer with yes or no.";

pub const ICT_SINGLE_SYSTEM_PROMPT: &str = "You are a captioning expert. Your task is to generate an accurate caption for the second image while referencing the first image. Both images contain the same object. The object in the first image is named <name>.";

pub const ICT_MULTI_SYSTEM_PROMPT: &str = "You are a captioning expert. Your task is to generate an accurate caption for the last query image while referencing the given reference images. The reference images each contain an object, named respectively as <names>.";

/// Reasoning-token prompts kept for reference; no training path uses them.
pub const UNUSED_REASONING_PROMPTS: &[&str] = &[
    "First output the thinking process in <think> </think> tags and then output the final answer in <answer> </answer> tags.",
    "First, observe carefully and enclose the observation process in <observe> </observe> tags and then output the final answer in <answer> </answer> tags.",
];

pub const OCT_TEMPLATES: &[&str] = &[
    "Please verify whether the objects in these pictures are the same. An object is considered the same if its consistency is maintained despite variations in lighting or pose.",
    "Is <name> visible in this picture?",
    "Is <name> in this image?",
    "Do you see <name> in the photo?",
    "Is <name> present in this photograph?",
    "Can you identify if <name> is captured in this picture?",
    "Is <name> depicted in this image?",
    "Does the picture feature <name>?",
    "Can you confirm if <name> appears in this photo?",
    "Is <name> included in this shot?",
    "Is <name> shown in this image?",
    "Can you tell if <name> is part of this photograph?",
    "Is there any sign of <name> in this picture?",
    "Can you detect <name> in the photo?",
    "Is <name> captured in this image?",
    "Do you recognize <name> in this picture?",
];

pub const VLT_TEMPLATES: &[&str] = &[
    "Please provide the bounding box coordinate of the region this sentence describes: <name>.",
    "Give <name>'s bounding box in the image.",
    "Describe <name>'s position in the image.",
    "Please provide the coordinates of the bounding box for <name> in the given image.",
    "Specify the rectangular boundaries of <name> in the image.",
    "Give <name>'s position in the following image.",
    "Please provide <name>'s bounding coordinates in the image.",
    "Indicate the bounding box for <name> in the image.",
    "Show the bounding box for <name> in the picture.",
    "Specify <name>'s bounding box in the photograph.",
    "Mark <name>'s bounding box within the image.",
];

pub const ICT_TEMPLATES: &[&str] = &[
    "Give a caption of the image.",
    "Give a personalized caption of this image.",
    "Provide a general caption of the image.",
    "Summarize the visual content of the image.",
    "Create a detail caption of the image.",
    "Offer a rich and clear interpretation of the image.",
    "Describe the image in detail.",
    "Render a summary of the photo.",
    "Provide a caption of the given image.",
    "Can you provide a personalized caption of this photo?",
    "Could you describe this image faithfully?",
    "Generate a detailed and accurate description of the image.",
    "Write a caption that reflects the contents and context of the image.",
    "Compose a meaningful caption that truly represents the image.",
    "Describe the image in a personalized and context-aware manner.",
    "Provide a natural-sounding caption that accurately conveys what is in the image.",
    "Craft a caption that authentically describes the scene in the image.",
    "Create a caption that captures the essence of the image.",
    "Write a caption that reflects what\u{2019}s visually happening in the photo.",
    "Generate a human-like description that accurately represents the image.",
    "Describe this image as if you were explaining it to a friend.",
    "Produce a relevant and truthful caption based on the image.",
    "Give a caption that matches the visual elements in the image.",
    "Summarize the visual content of this image in a natural way.",
    "Write an image-grounded caption that remains faithful to the content.",
    "Provide a descriptive sentence that corresponds closely to the image.",
];

/// Caption prompts used at evaluation time.
pub const EVAL_TEMPLATES: &[&str] = &[
    "Give a personalized caption of this image.",
    "Give a caption of the image.",
    "Can you provide a personalized caption for this photo?",
    "Provide a caption of the given image.",
];

/// ICT prompts that ask for a detailed description.
pub fn ict_detail_templates() -> Vec<&'static str> {
    ICT_TEMPLATES
        .iter()
        .copied()
        .filter(|t| t.to_lowercase().contains("detail"))
        .collect()
}

pub fn ict_plain_templates() -> Vec<&'static str> {
    ICT_TEMPLATES
        .iter()
        .copied()
        .filter(|t| !t.to_lowercase().contains("detail"))
        .collect()
}

pub fn fill(template: &str, name: &str) -> String {
    template.replace(NAME_SLOT, name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bank_sizes() {
        assert_eq!(OCT_TEMPLATES.len(), 16);
        assert_eq!(VLT_TEMPLATES.len(), 11);
        assert_eq!(ICT_TEMPLATES.len(), 26);
        assert_eq!(EVAL_TEMPLATES.len(), 4);
        assert_eq!(ict_detail_templates().len(), 3);
        assert_eq!(ict_plain_templates().len(), 23);
    }

    #[test]
    fn named_templates_have_slot() {
        assert!(VLT_TEMPLATES.iter().all(|t| t.contains(NAME_SLOT)));
        assert_eq!(
            OCT_TEMPLATES
                .iter()
                .filter(|t| t.contains(NAME_SLOT))
                .count(),
            15
        );
        assert_eq!(fill("Is <name> here?", "Alice"), "Is Alice here?");
    }
}
