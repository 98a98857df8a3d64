//! System prompt templates shipped with the engine.

pub const NARRATOR_SYSTEM: &str = include_str!("../assets/prompts/narrator_system.txt");
pub const DIRECTOR_SYSTEM: &str = include_str!("../assets/prompts/director_system.txt");
pub const TWIST_SYSTEM: &str = include_str!("../assets/prompts/twist_system.txt");
pub const SUMMARY_SYSTEM: &str = include_str!("../assets/prompts/summary_system.txt");
pub const IMAGE_PROMPT_SYSTEM: &str = include_str!("../assets/prompts/image_prompt_system.txt");
pub const BASELINE_SYSTEM: &str = include_str!("../assets/prompts/baseline_system.txt");
pub const VISION_SYSTEM: &str = include_str!("../assets/prompts/vision_system.txt");

/// Body of the `## NAME` section of an assembled prompt, without the
/// trailing blank line. `None` when the section is absent.
pub fn section<'a>(prompt: &'a str, name: &str) -> Option<&'a str> {
    let header = format!("## {name}\n");
    let start = if prompt.starts_with(&header) {
        header.len()
    } else {
        prompt.find(&format!("\n{header}"))? + header.len() + 1
    };
    let rest = &prompt[start..];
    let end = rest.find("\n## ").unwrap_or(rest.len());
    Some(rest[..end].trim_end_matches('\n'))
}

/// Value of the first `Key: value` line in `text`.
pub fn field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(": ")))
        .map(str::trim)
}
