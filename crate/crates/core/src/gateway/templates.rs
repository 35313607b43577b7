use std::io;
use std::path::Path;

/// Prompt templates for the remote backend.
///
/// Placeholders are `{question}`, `{reasoning}`, `{critique}`, `{branch_a}`
/// and `{branch_b}`. Unknown placeholders are left untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    /// First actor turn: `{question}`.
    pub actor: String,
    /// Follow-up actor turn after its previous answer: `{critique}`.
    pub refine: String,
    /// Critic prompt: `{question}`, `{reasoning}`.
    pub critic: String,
    /// Annotator prompt: `{question}`, `{reasoning}` (shared prefix),
    /// `{branch_a}`, `{branch_b}`.
    pub annotator: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            actor: include_str!("../../templates/actor.txt").to_string(),
            refine: include_str!("../../templates/refine.txt").to_string(),
            critic: include_str!("../../templates/critic.txt").to_string(),
            annotator: include_str!("../../templates/annotator.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Loads `actor.txt`, `refine.txt`, `critic.txt` and `annotator.txt` from
    /// `dir`, keeping the default for any file that is absent.
    pub fn load_dir(dir: &Path) -> io::Result<Self> {
        let mut t = Self::default();
        for (name, slot) in [
            ("actor.txt", &mut t.actor),
            ("refine.txt", &mut t.refine),
            ("critic.txt", &mut t.critic),
            ("annotator.txt", &mut t.annotator),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
        }
        Ok(t)
    }
}

/// Substitutes `{name}` placeholders in a single pass, so text inserted for
/// one placeholder is never re-scanned for another.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
