//! Scene taxonomy, five-level prompt sets and the closed-vocabulary
//! tokenizer for the text branch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GammaError, Result};

pub const LEVELS: [&str; 5] = ["bad", "poor", "fair", "good", "perfect"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scene {
    NaturalQuality,
    AiGeneratedQuality,
    UnderwaterQuality,
    FaceQuality,
    NaturalAesthetics,
    General,
}

impl Scene {
    pub const ALL: [Scene; 6] = [
        Scene::NaturalQuality,
        Scene::AiGeneratedQuality,
        Scene::UnderwaterQuality,
        Scene::FaceQuality,
        Scene::NaturalAesthetics,
        Scene::General,
    ];

    /// The five scene groups that carry their own prompts.
    pub const GROUPS: [Scene; 5] = [
        Scene::NaturalQuality,
        Scene::AiGeneratedQuality,
        Scene::UnderwaterQuality,
        Scene::FaceQuality,
        Scene::NaturalAesthetics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scene::NaturalQuality => "natural-quality",
            Scene::AiGeneratedQuality => "ai-generated-quality",
            Scene::UnderwaterQuality => "underwater-quality",
            Scene::FaceQuality => "face-quality",
            Scene::NaturalAesthetics => "natural-aesthetics",
            Scene::General => "general",
        }
    }

    fn word(self) -> Option<&'static str> {
        match self {
            Scene::NaturalQuality | Scene::NaturalAesthetics => Some("natural"),
            Scene::AiGeneratedQuality => Some("AI-generated"),
            Scene::UnderwaterQuality => Some("underwater"),
            Scene::FaceQuality => Some("face"),
            Scene::General => None,
        }
    }

    fn axis(self) -> &'static str {
        match self {
            Scene::NaturalAesthetics => "aesthetics",
            _ => "quality",
        }
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scene {
    type Err = GammaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| GammaError::Input(format!("unknown scene `{s}`")))
    }
}

/// Five prompts ordered bad → perfect.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PromptSet {
    levels: [String; 5],
}

impl PromptSet {
    pub fn new(levels: Vec<String>) -> Result<Self> {
        let n = levels.len();
        let levels: [String; 5] = levels
            .try_into()
            .map_err(|_| GammaError::Config(format!("a prompt set needs exactly 5 prompts, got {n}")))?;
        Ok(Self { levels })
    }

    fn from_fn(f: impl Fn(&str) -> String) -> Self {
        Self {
            levels: LEVELS.map(f),
        }
    }

    pub fn levels(&self) -> &[String; 5] {
        &self.levels
    }
}

/// `<scene-word> <level>-<axis> image`; the general scene gets the naive set.
pub fn prompts_for_scene(scene: Scene) -> PromptSet {
    match scene.word() {
        Some(w) => {
            let axis = scene.axis();
            PromptSet::from_fn(|l| format!("{w} {l}-{axis} image"))
        }
        None => naive_prompts(),
    }
}

pub fn naive_prompts() -> PromptSet {
    PromptSet::from_fn(|l| format!("{l} image"))
}

/// Which prompts a sample is scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStrategy {
    /// The sample's own scene prompts.
    Sdp,
    /// `<level> image` for every sample.
    #[default]
    Naive,
    /// Scene prompts with the scene word replaced by `general`.
    General,
    /// `<level>-quality image` for every sample.
    Quality,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 4] = [
        PromptStrategy::Sdp,
        PromptStrategy::Naive,
        PromptStrategy::General,
        PromptStrategy::Quality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptStrategy::Sdp => "sdp",
            PromptStrategy::Naive => "naive",
            PromptStrategy::General => "general",
            PromptStrategy::Quality => "quality",
        }
    }

    pub fn prompts(self, scene: Scene) -> PromptSet {
        match self {
            PromptStrategy::Sdp => prompts_for_scene(scene),
            PromptStrategy::Naive => naive_prompts(),
            PromptStrategy::General => match scene {
                Scene::General => naive_prompts(),
                s => {
                    let axis = s.axis();
                    PromptSet::from_fn(|l| format!("general {l}-{axis} image"))
                }
            },
            PromptStrategy::Quality => PromptSet::from_fn(|l| format!("{l}-quality image")),
        }
    }

    /// Whether different scenes can receive different prompt sets.
    pub fn is_scene_dependent(self) -> bool {
        matches!(self, PromptStrategy::Sdp | PromptStrategy::General)
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptStrategy {
    type Err = GammaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| GammaError::Config(format!("unknown prompt strategy `{s}`")))
    }
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Word → id map over the closed prompt lexicon; ids 0 and 1 are the pad
/// and unknown tokens, the rest follow sorted word order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: BTreeMap<String, usize>,
    words: Vec<String>,
}

impl Vocabulary {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut sorted: Vec<String> = words.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        sorted.sort();
        sorted.dedup();
        sorted.retain(|w| w != PAD && w != UNK);
        let mut all = vec![PAD.to_string(), UNK.to_string()];
        all.extend(sorted);
        let ids = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { ids, words: all }
    }

    /// Every word any scene or strategy can produce.
    pub fn lexicon() -> Self {
        let mut words = Vec::new();
        for strategy in PromptStrategy::ALL {
            for scene in Scene::ALL {
                for p in strategy.prompts(scene).levels() {
                    words.extend(split_words(p));
                }
            }
        }
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, prompt: &str) -> Vec<usize> {
        split_words(prompt)
            .iter()
            .map(|w| self.id(w).unwrap_or(self.unk_id()))
            .collect()
    }
}

fn split_words(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '-')
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// The scene prompt table as printable text, one scene per block.
pub fn prompt_table() -> String {
    let mut out = String::new();
    for scene in Scene::GROUPS.into_iter().chain([Scene::General]) {
        out.push_str(scene.name());
        out.push('\n');
        for p in prompts_for_scene(scene).levels() {
            out.push_str("  ");
            out.push_str(p);
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scene_prompts_follow_the_template() {
        assert_eq!(
            prompts_for_scene(Scene::FaceQuality).levels(),
            &[
                "face bad-quality image",
                "face poor-quality image",
                "face fair-quality image",
                "face good-quality image",
                "face perfect-quality image"
            ]
            .map(String::from)
        );
        assert_eq!(
            prompts_for_scene(Scene::NaturalAesthetics).levels()[4],
            "natural perfect-aesthetics image"
        );
        assert_eq!(
            prompts_for_scene(Scene::AiGeneratedQuality).levels()[0],
            "AI-generated bad-quality image"
        );
        assert_eq!(
            prompts_for_scene(Scene::UnderwaterQuality).levels()[2],
            "underwater fair-quality image"
        );
        assert_eq!(
            prompts_for_scene(Scene::General).levels(),
            &["bad image", "poor image", "fair image", "good image", "perfect image"].map(String::from)
        );
    }

    #[test]
    fn scenes_have_distinct_prompt_sets() {
        for (i, a) in Scene::ALL.iter().enumerate() {
            for b in &Scene::ALL[i + 1..] {
                assert_ne!(prompts_for_scene(*a), prompts_for_scene(*b));
            }
        }
    }

    #[test]
    fn strategies() {
        let s = Scene::UnderwaterQuality;
        assert_eq!(PromptStrategy::General.prompts(s).levels()[0], "general bad-quality image");
        assert_eq!(
            PromptStrategy::General.prompts(Scene::NaturalAesthetics).levels()[1],
            "general poor-aesthetics image"
        );
        assert_eq!(PromptStrategy::Quality.prompts(s).levels()[3], "good-quality image");
        assert_eq!(PromptStrategy::Naive.prompts(s), naive_prompts());
        assert_eq!("sdp".parse::<PromptStrategy>().unwrap(), PromptStrategy::Sdp);
        assert!("fancy".parse::<PromptStrategy>().is_err());
    }

    #[test]
    fn tokenizer_cases() {
        let v = Vocabulary::lexicon();
        assert!(v.len() <= 34);
        let id = |w| v.id(w).unwrap();
        assert_eq!(v.tokenize("bad image"), vec![id("bad"), id("image")]);
        assert_eq!(
            v.tokenize("face bad-quality image"),
            vec![id("face"), id("bad"), id("quality"), id("image")]
        );
        assert_eq!(v.tokenize("Zebra image"), vec![v.unk_id(), id("image")]);
        assert_eq!(v.tokenize("AI-generated"), vec![id("ai"), id("generated")]);
        for (i, w) in (0..v.len()).map(|i| (i, v.word(i).unwrap())) {
            assert_eq!(v.id(w), Some(i));
        }
        assert_eq!(Vocabulary::lexicon(), v);
    }

    #[test]
    fn every_prompt_is_in_vocabulary_and_short() {
        let v = Vocabulary::lexicon();
        for st in PromptStrategy::ALL {
            for sc in Scene::ALL {
                for p in st.prompts(sc).levels() {
                    let ids = v.tokenize(p);
                    assert!(!ids.contains(&v.unk_id()), "{p}");
                    assert!(ids.len() <= 16);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn tokenize_is_pure(s in "[a-zA-Z \\-]{0,40}") {
            let v = Vocabulary::lexicon();
            prop_assert_eq!(v.tokenize(&s), v.tokenize(&s));
            prop_assert!(v.tokenize(&s).iter().all(|&i| i < v.len()));
        }
    }
}
