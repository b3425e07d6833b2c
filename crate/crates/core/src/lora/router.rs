//! Modality router: maps the set of modalities present in a request to the
//! ordered list of adapters to activate.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Text,
    Image,
    Audio,
}

pub const LORA_V: &str = "LoRA_V";
pub const LORA_A: &str = "LoRA_A";

/// Total, deterministic routing rule. The canonical entries are
/// {text} -> [], {text,audio} -> [LoRA_A], {text,image} -> [LoRA_V],
/// {text,image,audio} -> [LoRA_V]; sets without text follow the same
/// image-over-audio precedence so the table covers every non-empty set.
#[derive(Debug, Clone)]
pub struct ModalityRouter {
    rule: BTreeMap<BTreeSet<Modality>, Vec<String>>,
}

impl Default for ModalityRouter {
    fn default() -> Self {
        let mut rule = BTreeMap::new();
        let all = [Modality::Text, Modality::Image, Modality::Audio];
        for bits in 1u8..8 {
            let set: BTreeSet<Modality> = all
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, m)| *m)
                .collect();
            let adapters = if set.contains(&Modality::Image) {
                vec![LORA_V.to_string()]
            } else if set.contains(&Modality::Audio) {
                vec![LORA_A.to_string()]
            } else {
                vec![]
            };
            rule.insert(set, adapters);
        }
        Self { rule }
    }
}

impl ModalityRouter {
    pub fn route(&self, modalities: &BTreeSet<Modality>) -> Result<Vec<String>> {
        if modalities.is_empty() {
            return Err(Error::Config("router requires a non-empty modality set".into()));
        }
        self.rule
            .get(modalities)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no routing rule for {modalities:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ms: &[Modality]) -> BTreeSet<Modality> {
        ms.iter().copied().collect()
    }

    #[test]
    fn canonical_rules() {
        let r = ModalityRouter::default();
        assert_eq!(r.route(&set(&[Modality::Text])).unwrap(), Vec::<String>::new());
        assert_eq!(r.route(&set(&[Modality::Text, Modality::Audio])).unwrap(), vec![LORA_A]);
        assert_eq!(r.route(&set(&[Modality::Text, Modality::Image])).unwrap(), vec![LORA_V]);
        assert_eq!(
            r.route(&set(&[Modality::Text, Modality::Image, Modality::Audio])).unwrap(),
            vec![LORA_V]
        );
    }

    #[test]
    fn total_over_all_nonempty_sets_and_deterministic() {
        let r = ModalityRouter::default();
        let all = [Modality::Text, Modality::Image, Modality::Audio];
        for bits in 1u8..8 {
            let s: BTreeSet<Modality> = all
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, m)| *m)
                .collect();
            let first = r.route(&s).unwrap();
            let second = r.route(&s).unwrap();
            assert_eq!(first, second);
        }
        assert!(r.route(&BTreeSet::new()).is_err());
    }
}
