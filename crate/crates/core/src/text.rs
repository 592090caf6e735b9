//! Deterministic hashed-trigram text embedding, utterance masking and
//! entity matching.

use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::{D_TEXT, K_ENT};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn normalize_words(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Character trigrams of a word padded with `^` and `$` boundary marks.
pub fn word_trigrams(word: &str) -> Vec<String> {
    let chars: Vec<char> = std::iter::once('^')
        .chain(word.chars())
        .chain(std::iter::once('$'))
        .collect();
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

fn accumulate_word(word: &str, out: &mut [f32]) {
    for tri in word_trigrams(word) {
        let h = fnv1a64(tri.as_bytes());
        let bucket = (h % D_TEXT as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        out[bucket] += sign;
    }
}

fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Embeds a string into `D_TEXT` dimensions. Empty (or punctuation-only)
/// input gives the zero vector, everything else has unit L2 norm.
pub fn embed_text(s: &str) -> Vec<f32> {
    let mut out = vec![0.0f32; D_TEXT];
    for w in normalize_words(s) {
        accumulate_word(&w, &mut out);
    }
    l2_normalize(&mut out);
    out
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine similarity clamped into `[0, 1]`.
pub fn text_similarity(a: &str, b: &str) -> f32 {
    cosine(&embed_text(a), &embed_text(b)).clamp(0.0, 1.0)
}

/// Similarity of an element's combined text to one entity string.
pub fn entity_match(element_text: &str, entity: &str) -> f32 {
    text_similarity(element_text, entity)
}

/// Mean over the element's words of the best word-level similarity against
/// any utterance word.
pub fn words_match(element_text: &str, utterance: &str) -> f32 {
    let elem_words = normalize_words(element_text);
    let utt: Vec<Vec<f32>> = normalize_words(utterance)
        .iter()
        .map(|w| embed_text(w))
        .collect();
    if elem_words.is_empty() || utt.is_empty() {
        return 0.0;
    }
    let total: f32 = elem_words
        .iter()
        .map(|w| {
            let e = embed_text(w);
            utt.iter()
                .map(|u| cosine(&e, u).clamp(0.0, 1.0))
                .fold(0.0f32, f32::max)
        })
        .sum();
    (total / elem_words.len() as f32).clamp(0.0, 1.0)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TextError {
    #[error("no template matches utterance {0:?}")]
    NoTemplateMatch(String),
    #[error("template {id}: {reason}")]
    BadTemplate { id: String, reason: String },
    #[error("template registry line {line}: {reason}")]
    Registry { line: usize, reason: String },
    #[error("io: {0}")]
    Io(String),
}

/// A task utterance pattern such as `search for {query} in {app}`.
#[derive(Clone, Debug)]
pub struct TaskTemplate {
    pub template_id: String,
    pub pattern: String,
    pub slot_names: Vec<String>,
    matcher: Regex,
    literal_len: usize,
}

impl PartialEq for TaskTemplate {
    fn eq(&self, other: &Self) -> bool {
        self.template_id == other.template_id && self.pattern == other.pattern
    }
}

impl TaskTemplate {
    pub fn new(template_id: &str, pattern: &str) -> Result<Self, TextError> {
        let bad = |reason: String| TextError::BadTemplate {
            id: template_id.to_owned(),
            reason,
        };
        let slot_re = Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static regex");
        let mut slot_names = Vec::new();
        let mut re = String::from("(?i)^");
        let mut last = 0;
        let mut literal_len = 0;
        for cap in slot_re.captures_iter(pattern) {
            let whole = cap.get(0).unwrap();
            let lit = &pattern[last..whole.start()];
            literal_len += lit.len();
            re.push_str(&regex::escape(lit));
            re.push_str("(.+)");
            let name = cap[1].to_owned();
            if slot_names.contains(&name) {
                return Err(bad(format!("duplicate slot {name}")));
            }
            slot_names.push(name);
            last = whole.end();
        }
        let tail = &pattern[last..];
        literal_len += tail.len();
        re.push_str(&regex::escape(tail));
        re.push('$');
        if slot_names.len() > K_ENT {
            return Err(bad(format!(
                "{} slots exceed the entity limit {K_ENT}",
                slot_names.len()
            )));
        }
        let matcher = Regex::new(&re).map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            template_id: template_id.to_owned(),
            pattern: pattern.to_owned(),
            slot_names,
            matcher,
            literal_len,
        })
    }

    /// Slot value spans `(start, end)` in `raw` if the template matches.
    fn match_spans(&self, raw: &str) -> Option<Vec<(usize, usize)>> {
        let caps = self.matcher.captures(raw)?;
        Some(
            (1..caps.len())
                .map(|i| {
                    let m = caps.get(i).unwrap();
                    (m.start(), m.end())
                })
                .collect(),
        )
    }

    /// Slot values of `raw` in slot order, if the template matches.
    pub fn extract(&self, raw: &str) -> Option<Vec<String>> {
        let spans = self.match_spans(raw)?;
        Some(spans.into_iter().map(|(s, e)| raw[s..e].to_owned()).collect())
    }

    /// Fills the pattern's slots with `values` in slot order.
    pub fn render(&self, values: &[&str]) -> String {
        let mut out = self.pattern.clone();
        for (name, v) in self.slot_names.iter().zip(values) {
            out = out.replace(&format!("{{{name}}}"), v);
        }
        out
    }
}

/// An ordered set of templates, loaded from `template_id <TAB> pattern` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemplateRegistry {
    templates: Vec<TaskTemplate>,
}

impl TemplateRegistry {
    pub fn new(templates: Vec<TaskTemplate>) -> Self {
        Self { templates }
    }

    pub fn parse(text: &str) -> Result<Self, TextError> {
        let mut templates = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, pattern) = line.split_once('\t').ok_or(TextError::Registry {
                line: i + 1,
                reason: "expected `template_id<TAB>pattern`".into(),
            })?;
            templates.push(TaskTemplate::new(id.trim(), pattern.trim())?);
        }
        Ok(Self { templates })
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path).map_err(|e| TextError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.templates
            .iter()
            .map(|t| format!("{}\t{}\n", t.template_id, t.pattern))
            .collect()
    }

    pub fn templates(&self) -> &[TaskTemplate] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Option<&TaskTemplate> {
        self.templates.iter().find(|t| t.template_id == id)
    }

    /// SHA-256 of the canonical registry text, recorded in model manifests.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Instruction text with its variable sub-strings replaced by `<slot_k>`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "MaskedUtteranceRepr")]
pub struct MaskedUtterance {
    pub template_id: Option<String>,
    pub masked_text: String,
    pub entities: Vec<String>,
    #[serde(skip_serializing)]
    embed: Vec<f32>,
}

#[derive(Deserialize)]
struct MaskedUtteranceRepr {
    template_id: Option<String>,
    masked_text: String,
    entities: Vec<String>,
}

impl From<MaskedUtteranceRepr> for MaskedUtterance {
    fn from(r: MaskedUtteranceRepr) -> Self {
        Self::new(r.template_id, r.masked_text, r.entities)
    }
}

impl PartialEq for MaskedUtterance {
    fn eq(&self, other: &Self) -> bool {
        self.template_id == other.template_id
            && self.masked_text == other.masked_text
            && self.entities == other.entities
    }
}

impl MaskedUtterance {
    pub fn new(template_id: Option<String>, masked_text: String, entities: Vec<String>) -> Self {
        let embed = embed_text(&masked_text);
        Self {
            template_id,
            masked_text,
            entities,
            embed,
        }
    }

    /// The fallback used when masking is disabled or no template matches.
    pub fn unmasked(raw: &str) -> Self {
        Self::new(None, raw.to_owned(), Vec::new())
    }

    pub fn embed(&self) -> &[f32] {
        &self.embed
    }

}

impl fmt::Display for MaskedUtterance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?}", self.masked_text, self.entities)
    }
}

pub fn placeholder(k: usize) -> String {
    format!("<slot_{k}>")
}

/// Masks `raw` against the best matching template: the one with the longest
/// literal pattern text, earlier templates winning ties.
pub fn mask_utterance(raw: &str, templates: &TemplateRegistry) -> Result<MaskedUtterance, TextError> {
    let mut best: Option<(&TaskTemplate, Vec<(usize, usize)>)> = None;
    for t in templates.templates() {
        if let Some(spans) = t.match_spans(raw) {
            let better = match &best {
                None => true,
                Some((b, _)) => t.literal_len > b.literal_len,
            };
            if better {
                best = Some((t, spans));
            }
        }
    }
    let (template, spans) = best.ok_or_else(|| TextError::NoTemplateMatch(raw.to_owned()))?;
    let mut masked = String::with_capacity(raw.len());
    let mut entities = Vec::with_capacity(spans.len());
    let mut last = 0;
    for (k, (s, e)) in spans.iter().copied().enumerate() {
        masked.push_str(&raw[last..s]);
        masked.push_str(&placeholder(k));
        entities.push(raw[s..e].to_owned());
        last = e;
    }
    masked.push_str(&raw[last..]);
    Ok(MaskedUtterance::new(
        Some(template.template_id.clone()),
        masked,
        entities,
    ))
}

/// Utterance as the models see it. With `masking` the best template's slot
/// values become placeholders; without it the raw text is embedded as is but
/// the slot values are still listed as entities so they can be typed. Text
/// that fits no template falls back to the raw form with no entities.
pub fn mask_or_unmasked(raw: &str, templates: &TemplateRegistry, masking: bool) -> MaskedUtterance {
    match mask_utterance(raw, templates) {
        Ok(m) if masking => m,
        Ok(m) => MaskedUtterance::new(m.template_id, raw.to_owned(), m.entities),
        Err(_) => MaskedUtterance::unmasked(raw),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> TemplateRegistry {
        TemplateRegistry::parse(
            "search\tsearch for {query} in {app}\nopen\topen {app}\ncart\topen the cart in shop\n",
        )
        .unwrap()
    }

    #[test]
    fn empty_text_embeds_to_zero() {
        assert!(embed_text("").iter().all(|&x| x == 0.0));
        assert!(embed_text("  ?! ").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_empty_text_is_unit_norm() {
        for s in ["a", "settings", "Search videos", "bob@mail.com"] {
            let n = embed_text(s).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{s}: {n}");
        }
    }

    #[test]
    fn masks_the_two_slot_search_example() {
        let m = mask_utterance("search for tiktok in Google", &registry()).unwrap();
        assert_eq!(m.entities, vec!["tiktok", "Google"]);
        assert_eq!(m.masked_text, "search for <slot_0> in <slot_1>");
        assert_eq!(m.template_id.as_deref(), Some("search"));
    }

    #[test]
    fn zero_slot_template_keeps_text() {
        let m = mask_utterance("open the cart in shop", &registry()).unwrap();
        assert!(m.entities.is_empty());
        assert_eq!(m.masked_text, "open the cart in shop");
        // The longer literal wins over `open {app}`.
        assert_eq!(m.template_id.as_deref(), Some("cart"));
    }

    #[test]
    fn slot_values_do_not_change_embedding() {
        let a = mask_utterance("search for tiktok in Google", &registry()).unwrap();
        let b = mask_utterance("search for cat videos in Tube", &registry()).unwrap();
        assert_eq!(a.masked_text, b.masked_text);
        assert_eq!(a.embed(), b.embed());
    }

    #[test]
    fn no_match_is_an_error() {
        let err = mask_utterance("dance wildly", &registry()).unwrap_err();
        assert_eq!(err, TextError::NoTemplateMatch("dance wildly".into()));
        let fallback = mask_or_unmasked("dance wildly", &registry(), true);
        assert!(fallback.entities.is_empty());
        assert_eq!(fallback.masked_text, "dance wildly");
    }

    #[test]
    fn unmasked_mode_embeds_raw_text_but_keeps_entities() {
        let raw = "search for tiktok in Google";
        let u = mask_or_unmasked(raw, &registry(), false);
        assert_eq!(u.masked_text, raw);
        assert_eq!(u.entities, vec!["tiktok", "Google"]);
        assert_eq!(u.embed(), embed_text(raw).as_slice());
    }

    #[test]
    fn entity_match_edge_cases() {
        assert!((entity_match("tiktok", "tiktok") - 1.0).abs() < 1e-6);
        assert_eq!(entity_match("", "tiktok"), 0.0);
        assert_eq!(entity_match("tiktok", ""), 0.0);
        let partial = entity_match("tiktok videos", "tiktok");
        assert!(partial > 0.0 && partial < 1.0);
    }

    #[test]
    fn words_match_edge_cases() {
        assert!((words_match("open the settings page", "open the settings page") - 1.0).abs() < 1e-6);
        assert_eq!(words_match("", "open the settings page"), 0.0);
    }

    #[test]
    fn templates_reject_bad_patterns() {
        assert!(TaskTemplate::new("t", "{a} {a}").is_err());
        assert!(TaskTemplate::new("t", "{a} {b} {c} {d} {e}").is_err());
        assert!(TemplateRegistry::parse("no tab here").is_err());
    }

    #[test]
    fn registry_round_trips_through_text() {
        let r = registry();
        let again = TemplateRegistry::parse(&r.to_text()).unwrap();
        assert_eq!(r, again);
        assert_eq!(r.content_hash(), again.content_hash());
    }
}
