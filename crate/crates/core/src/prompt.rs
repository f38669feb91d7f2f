//! Single-pass slot substitution for the versioned prompt resources.
//!
//! Slots are written `{Input video title}` / `{Input video transcript}` in the
//! templates. Everything else, including literal JSON braces in few-shot
//! examples, is copied verbatim; substituted values are never rescanned.

pub(crate) const TITLE_SLOT: &str = "{Input video title}";
pub(crate) const TRANSCRIPT_SLOT: &str = "{Input video transcript}";

pub(crate) fn render(template: &str, title: &str, transcript: &str) -> String {
    let mut out = String::with_capacity(template.len() + title.len() + transcript.len());
    let mut rest = template;
    loop {
        let next = [(TITLE_SLOT, title), (TRANSCRIPT_SLOT, transcript)]
            .into_iter()
            .filter_map(|(slot, value)| rest.find(slot).map(|pos| (pos, slot, value)))
            .min_by_key(|(pos, _, _)| *pos);
        match next {
            Some((pos, slot, value)) => {
                out.push_str(&rest[..pos]);
                out.push_str(value);
                rest = &rest[pos + slot.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}
