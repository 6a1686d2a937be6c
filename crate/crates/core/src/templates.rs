//! Instruction templates sent to remote multimodal backends, shipped verbatim.

use crate::prompt::Category;

pub const VERIFIER_SINGLE_OBJECT: &str = include_str!("../assets/templates/verifier_single_object.txt");
pub const VERIFIER_TWO_OBJECTS: &str = include_str!("../assets/templates/verifier_two_objects.txt");
pub const VERIFIER_COUNTING: &str = include_str!("../assets/templates/verifier_counting.txt");
pub const VERIFIER_COLORS: &str = include_str!("../assets/templates/verifier_colors.txt");
pub const VERIFIER_POSITION: &str = include_str!("../assets/templates/verifier_position.txt");
pub const VERIFIER_COLOR_ATTRIBUTION: &str = include_str!("../assets/templates/verifier_color_attribution.txt");
pub const REFLECTION: &str = include_str!("../assets/templates/reflection.txt");
pub const REFINE_PROMPT: &str = include_str!("../assets/templates/refine_prompt.txt");
pub const COT_REFLECTION: &str = include_str!("../assets/templates/cot_reflection.txt");

pub fn verifier_template(category: Category) -> &'static str {
    match category {
        Category::SingleObject => VERIFIER_SINGLE_OBJECT,
        Category::TwoObjects => VERIFIER_TWO_OBJECTS,
        Category::Counting => VERIFIER_COUNTING,
        Category::Colors => VERIFIER_COLORS,
        Category::Position => VERIFIER_POSITION,
        Category::ColorAttribution => VERIFIER_COLOR_ATTRIBUTION,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::report::aspect_keys;

    #[test]
    fn verifier_templates_name_their_keys() {
        for category in Category::ALL {
            let text = verifier_template(category);
            for key in aspect_keys(category) {
                assert!(text.contains(key), "{category}: template lacks {key}");
            }
            assert!(text.contains("overall_score"));
        }
    }

    #[test]
    fn reflection_template_lists_the_verbs() {
        assert!(REFLECTION.contains("Add, Remove, Replace, Reposition, Adjust"));
        assert!(REFINE_PROMPT.contains("Directly output the refined prompt"));
        for key in ["\"Analysis\"", "\"Result\"", "\"Instructions\""] {
            assert!(COT_REFLECTION.contains(key));
        }
    }
}
