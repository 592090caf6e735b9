//! Device-state representation: UI elements, screens and the fixed-width
//! per-element feature rows consumed by the agent and referee.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::text::{embed_text, entity_match, normalize_words, MaskedUtterance};
use crate::{D_ELEM, D_TEXT, K_ENT, N_MAX};

pub const SCREEN_SCHEMA_VERSION: &str = "v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElemType {
    Button,
    Icon,
    TextField,
    Label,
    Checkbox,
    Switch,
    ListItem,
    Image,
    Container,
}

impl ElemType {
    pub const ALL: [ElemType; 9] = [
        ElemType::Button,
        ElemType::Icon,
        ElemType::TextField,
        ElemType::Label,
        ElemType::Checkbox,
        ElemType::Switch,
        ElemType::ListItem,
        ElemType::Image,
        ElemType::Container,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateFlags {
    pub checked: bool,
    pub focused: bool,
    pub enabled: bool,
    pub clickable: bool,
    pub editable: bool,
}

impl StateFlags {
    pub fn to_vec(self) -> [f32; 5] {
        let f = |b: bool| if b { 1.0 } else { 0.0 };
        [
            f(self.checked),
            f(self.focused),
            f(self.enabled),
            f(self.clickable),
            f(self.editable),
        ]
    }
}

/// `(left, top, right, bottom)` in normalized screen coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox(pub [f32; 4]);

impl BBox {
    pub fn new(left: f32, top: f32, right: f32, bottom: f32) -> Self {
        Self([left, top, right, bottom])
    }
    pub fn left(&self) -> f32 {
        self.0[0]
    }
    pub fn top(&self) -> f32 {
        self.0[1]
    }
    pub fn right(&self) -> f32 {
        self.0[2]
    }
    pub fn bottom(&self) -> f32 {
        self.0[3]
    }
    pub fn is_valid(&self) -> bool {
        let [l, t, r, b] = self.0;
        (0.0..=1.0).contains(&l)
            && (0.0..=1.0).contains(&t)
            && (0.0..=1.0).contains(&r)
            && (0.0..=1.0).contains(&b)
            && l < r
            && t < b
    }
    pub fn area(&self) -> f32 {
        (self.right() - self.left()) * (self.bottom() - self.top())
    }
    pub fn center(&self) -> (f32, f32) {
        (
            0.5 * (self.left() + self.right()),
            0.5 * (self.top() + self.bottom()),
        )
    }
    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.left() && x <= self.right() && y >= self.top() && y <= self.bottom()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UiElement {
    pub id: String,
    pub elem_type: ElemType,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub content_desc: String,
    #[serde(default)]
    pub resource_id: String,
    pub bbox: BBox,
    pub state_flags: StateFlags,
    #[serde(default)]
    pub critical: bool,
    /// Replacement text embedding set by demonstration augmentation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embed_override: Option<Vec<f32>>,
}

impl UiElement {
    /// Text, content description and resource id, space-joined and lowercased.
    pub fn combined_text(&self) -> String {
        [&self.text, &self.content_desc, &self.resource_id]
            .iter()
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase()
    }

    /// True when the two elements agree on every attribute compared by
    /// action validation.
    pub fn same_appearance(&self, other: &UiElement) -> bool {
        self.bbox == other.bbox && self.text == other.text && self.state_flags == other.state_flags
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScreenError {
    #[error("screen has no elements")]
    Empty,
    #[error("duplicate element id {0}")]
    DuplicateId(String),
    #[error("element {0} has an invalid bbox {1:?}")]
    BadBBox(String, [f32; 4]),
    #[error("unsupported screen schema version {0:?}")]
    Version(String),
    #[error("json: {0}")]
    Json(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScreenDoc", into = "ScreenDoc")]
pub struct Screen {
    pub screen_id: String,
    pub stable: bool,
    pub elements: Vec<UiElement>,
}

#[derive(Serialize, Deserialize)]
struct ScreenDoc {
    v: String,
    screen_id: String,
    stable: bool,
    elements: Vec<UiElement>,
}

impl TryFrom<ScreenDoc> for Screen {
    type Error = ScreenError;
    fn try_from(doc: ScreenDoc) -> Result<Self, ScreenError> {
        if doc.v != SCREEN_SCHEMA_VERSION {
            return Err(ScreenError::Version(doc.v));
        }
        let s = Screen {
            screen_id: doc.screen_id,
            stable: doc.stable,
            elements: doc.elements,
        };
        s.check()?;
        Ok(s)
    }
}

impl From<Screen> for ScreenDoc {
    fn from(s: Screen) -> Self {
        ScreenDoc {
            v: SCREEN_SCHEMA_VERSION.to_owned(),
            screen_id: s.screen_id,
            stable: s.stable,
            elements: s.elements,
        }
    }
}

impl Screen {
    /// Builds a screen, truncating to `N_MAX` elements: critical elements are
    /// kept first, then the largest by area. Retained elements keep their
    /// original order.
    pub fn new(screen_id: impl Into<String>, stable: bool, elements: Vec<UiElement>) -> Self {
        Self {
            screen_id: screen_id.into(),
            stable,
            elements: truncate_elements(elements),
        }
    }

    pub fn check(&self) -> Result<(), ScreenError> {
        if self.elements.is_empty() {
            return Err(ScreenError::Empty);
        }
        let mut seen = HashSet::new();
        for e in &self.elements {
            if !seen.insert(e.id.as_str()) {
                return Err(ScreenError::DuplicateId(e.id.clone()));
            }
            if !e.bbox.is_valid() {
                return Err(ScreenError::BadBBox(e.id.clone(), e.bbox.0));
            }
        }
        Ok(())
    }

    pub fn element(&self, id: &str) -> Option<&UiElement> {
        self.elements.iter().find(|e| e.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.elements.iter().position(|e| e.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("screen serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ScreenError> {
        serde_json::from_str(s).map_err(|e| ScreenError::Json(e.to_string()))
    }
}

fn truncate_elements(elements: Vec<UiElement>) -> Vec<UiElement> {
    if elements.len() <= N_MAX {
        return elements;
    }
    let mut order: Vec<usize> = (0..elements.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&elements[a], &elements[b]);
        eb.critical
            .cmp(&ea.critical)
            .then(eb.bbox.area().total_cmp(&ea.bbox.area()))
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = order.into_iter().take(N_MAX).collect();
    keep.sort_unstable();
    let mut slots: Vec<Option<UiElement>> = elements.into_iter().map(Some).collect();
    keep.into_iter().map(|i| slots[i].take().unwrap()).collect()
}

/// Feature row of one element. The layout of [`ElementFeatures::write_row`]
/// is `type_onehot | text_embed | bbox | match_vec | state_vec`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementFeatures {
    pub type_onehot: [f32; 9],
    pub text_embed: Vec<f32>,
    pub bbox: [f32; 4],
    pub match_vec: [f32; K_ENT + 1],
    pub state_vec: [f32; 5],
}

impl ElementFeatures {
    pub fn write_row(&self, out: &mut Vec<f32>) {
        out.extend_from_slice(&self.type_onehot);
        out.extend_from_slice(&self.text_embed);
        out.extend_from_slice(&self.bbox);
        out.extend_from_slice(&self.match_vec);
        out.extend_from_slice(&self.state_vec);
    }

    pub fn to_vec(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(D_ELEM);
        self.write_row(&mut v);
        v
    }
}

/// Per-utterance cache of word embeddings used by `utterance_match`.
pub struct UtteranceContext<'a> {
    pub utterance: &'a MaskedUtterance,
    word_embeds: Vec<Vec<f32>>,
}

impl<'a> UtteranceContext<'a> {
    pub fn new(utterance: &'a MaskedUtterance) -> Self {
        let word_embeds = normalize_words(&utterance.masked_text)
            .iter()
            .map(|w| embed_text(w))
            .collect();
        Self {
            utterance,
            word_embeds,
        }
    }

    fn words_match(&self, text: &str) -> f32 {
        let words = normalize_words(text);
        if words.is_empty() || self.word_embeds.is_empty() {
            return 0.0;
        }
        let total: f32 = words
            .iter()
            .map(|w| {
                let e = embed_text(w);
                self.word_embeds
                    .iter()
                    .map(|u| dot(&e, u).clamp(0.0, 1.0))
                    .fold(0.0f32, f32::max)
            })
            .sum();
        (total / words.len() as f32).clamp(0.0, 1.0)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean best word similarity between the element's text and the utterance.
pub fn utterance_match(e: &UiElement, u: &MaskedUtterance) -> f32 {
    UtteranceContext::new(u).words_match(&e.combined_text())
}

pub fn featurize_element(e: &UiElement, u: &MaskedUtterance) -> ElementFeatures {
    featurize_with(e, &UtteranceContext::new(u))
}

pub fn featurize_with(e: &UiElement, ctx: &UtteranceContext<'_>) -> ElementFeatures {
    let combined = e.combined_text();
    let mut type_onehot = [0.0; 9];
    type_onehot[e.elem_type.index()] = 1.0;
    let text_embed = match &e.text_embed_override {
        Some(v) => {
            debug_assert_eq!(v.len(), D_TEXT);
            v.clone()
        }
        None => embed_text(&combined),
    };
    let mut match_vec = [0.0; K_ENT + 1];
    for (i, entity) in ctx.utterance.entities.iter().take(K_ENT).enumerate() {
        match_vec[i] = entity_match(&combined, entity);
    }
    match_vec[K_ENT] = ctx.words_match(&combined);
    ElementFeatures {
        type_onehot,
        text_embed,
        bbox: e.bbox.0,
        match_vec,
        state_vec: e.state_flags.to_vec(),
    }
}

/// Row-major `rows x D_ELEM` feature matrix of one screen.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * D_ELEM..(i + 1) * D_ELEM]
    }
}

pub fn featurize_screen(screen: &Screen, u: &MaskedUtterance) -> FeatureMatrix {
    let ctx = UtteranceContext::new(u);
    let mut data = Vec::with_capacity(screen.elements.len() * D_ELEM);
    for e in &screen.elements {
        featurize_with(e, &ctx).write_row(&mut data);
    }
    FeatureMatrix {
        rows: screen.elements.len(),
        data,
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn element(id: &str, ty: ElemType, text: &str, bbox: [f32; 4]) -> UiElement {
        UiElement {
            id: id.into(),
            elem_type: ty,
            text: text.into(),
            content_desc: String::new(),
            resource_id: String::new(),
            bbox: BBox(bbox),
            state_flags: StateFlags {
                enabled: true,
                clickable: true,
                ..Default::default()
            },
            critical: false,
            text_embed_override: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::element;
    use super::*;
    use crate::text::embed_text;

    fn utt(entities: &[&str], text: &str) -> MaskedUtterance {
        MaskedUtterance::new(None, text.into(), entities.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn feature_width_is_constant() {
        let u = utt(&["a"], "x");
        let f = featurize_element(&element("a", ElemType::Button, "hi", [0.1, 0.1, 0.2, 0.2]), &u);
        assert_eq!(f.to_vec().len(), D_ELEM);
        assert_eq!(D_ELEM, 9 + D_TEXT + 4 + K_ENT + 1 + 5);
    }

    #[test]
    fn empty_text_gives_zero_embedding() {
        let u = utt(&["tiktok"], "search for <slot_0>");
        let f = featurize_element(&element("a", ElemType::Icon, "", [0.1, 0.1, 0.2, 0.2]), &u);
        assert!(f.text_embed.iter().all(|&x| x == 0.0));
        assert_eq!(f.match_vec, [0.0; K_ENT + 1]);
    }

    #[test]
    fn exact_entity_text_matches_fully() {
        let u = utt(&["tiktok"], "search for <slot_0>");
        let f = featurize_element(&element("a", ElemType::Label, "TikTok ", [0.1, 0.1, 0.2, 0.2]), &u);
        assert!((f.match_vec[0] - 1.0).abs() < 1e-6);
        assert_eq!(f.match_vec[1], 0.0);
    }

    #[test]
    fn combined_text_joins_sources_in_order() {
        let mut e = element("a", ElemType::Icon, "Go", [0.1, 0.1, 0.2, 0.2]);
        e.content_desc = "Search".into();
        e.resource_id = "app:id/search_btn".into();
        assert_eq!(e.combined_text(), "go search app:id/search_btn");
        let f = featurize_element(&e, &utt(&[], "x"));
        assert_eq!(f.text_embed, embed_text("go search app:id/search_btn"));
    }

    #[test]
    fn embed_override_replaces_text_slot_only() {
        let mut e = element("a", ElemType::Label, "tiktok", [0.1, 0.1, 0.2, 0.2]);
        let base = featurize_element(&e, &utt(&["tiktok"], "x"));
        e.text_embed_override = Some(vec![0.125; D_TEXT]);
        let f = featurize_element(&e, &utt(&["tiktok"], "x"));
        assert_eq!(f.text_embed, vec![0.125; D_TEXT]);
        assert_eq!(f.match_vec, base.match_vec);
    }

    #[test]
    fn truncation_keeps_critical_then_largest() {
        let mut els = Vec::new();
        for i in 0..(N_MAX + 6) {
            let w = 0.001 * (i as f32 + 1.0);
            els.push(element(&format!("e{i}"), ElemType::Label, "", [0.0, 0.0, w, 0.5]));
        }
        els[0].critical = true;
        let s = Screen::new("s", true, els);
        assert_eq!(s.elements.len(), N_MAX);
        assert_eq!(s.elements[0].id, "e0");
        // The smallest non-critical elements (e1..e6) are the ones dropped.
        assert!(s.element("e1").is_none() && s.element("e6").is_none());
        assert!(s.element("e7").is_some());
    }

    #[test]
    fn screen_json_round_trip_and_version_check() {
        let s = Screen::new(
            "home",
            true,
            vec![element("a", ElemType::Button, "OK", [0.1, 0.2, 0.3, 0.4])],
        );
        let j = s.to_json();
        assert!(j.contains("\"v\":\"v1\""));
        assert_eq!(Screen::from_json(&j).unwrap(), s);
        let bad = j.replace("\"v1\"", "\"v0\"");
        assert!(Screen::from_json(&bad).is_err());
    }

    #[test]
    fn check_rejects_invalid_screens() {
        let e = element("a", ElemType::Button, "", [0.3, 0.2, 0.1, 0.4]);
        assert!(matches!(
            Screen::new("s", true, vec![e]).check(),
            Err(ScreenError::BadBBox(..))
        ));
        let a = element("a", ElemType::Button, "", [0.1, 0.2, 0.3, 0.4]);
        assert!(matches!(
            Screen::new("s", true, vec![a.clone(), a]).check(),
            Err(ScreenError::DuplicateId(_))
        ));
        assert_eq!(Screen::new("s", true, vec![]).check(), Err(ScreenError::Empty));
    }
}
