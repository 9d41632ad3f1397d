use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Maps original sublabel directory names onto the binary classes
/// 0 (normal/benign) and 1 (malignant).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinarizationMap {
    pub domain: String,
    map: BTreeMap<String, u8>,
}

impl BinarizationMap {
    pub fn new(domain: impl Into<String>, entries: impl IntoIterator<Item = (String, u8)>) -> Result<Self> {
        let domain = domain.into();
        let map: BTreeMap<String, u8> = entries.into_iter().collect();
        if let Some((name, &v)) = map.iter().find(|(_, &v)| v > 1) {
            return Err(Error::Config(format!("sublabel {name:?} maps to class {v}; classes are 0 and 1")));
        }
        if !map.values().any(|&v| v == 0) || !map.values().any(|&v| v == 1) {
            return Err(Error::Config(format!(
                "binarization for {domain:?} must map at least one sublabel to each class"
            )));
        }
        Ok(BinarizationMap { domain, map })
    }

    /// Built-in maps for breast, kidney, lung and colon. Both the plain
    /// sublabel names and the prefixed directory names of the public
    /// Multi Cancer release are accepted. Any domain whose name starts with
    /// `synth` maps the generator's `sparse`/`dense` folders.
    pub fn preset(domain: &str) -> Result<Self> {
        let pairs: &[(&str, u8)] = match domain {
            "breast" => &[
                ("benign", 0),
                ("malignant", 1),
                ("breast_benign", 0),
                ("breast_malignant", 1),
            ],
            "kidney" => &[
                ("normal", 0),
                ("tumor", 1),
                ("kidney_normal", 0),
                ("kidney_tumor", 1),
            ],
            "lung" => &[
                ("benign", 0),
                ("adenocarcinoma", 1),
                ("lung_bnt", 0),
                ("lung_aca", 1),
            ],
            "colon" => &[
                ("benign", 0),
                ("adenocarcinoma", 1),
                ("colon_bnt", 0),
                ("colon_aca", 1),
            ],
            d if d.starts_with("synth") => &[("sparse", 0), ("dense", 1)],
            other => return Err(Error::Config(format!("no built-in binarization for domain {other:?}"))),
        };
        BinarizationMap::new(domain, pairs.iter().map(|&(k, v)| (k.to_string(), v)))
    }

    pub fn class_of(&self, sublabel: &str) -> Result<u8> {
        self.map
            .get(sublabel)
            .copied()
            .ok_or_else(|| Error::UnmappedSublabel(sublabel.to_string()))
    }

    pub fn entries(&self) -> &BTreeMap<String, u8> {
        &self.map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_total_and_onto() {
        for d in ["breast", "kidney", "lung", "colon"] {
            let m = BinarizationMap::preset(d).unwrap();
            let classes: std::collections::BTreeSet<u8> = m.entries().values().copied().collect();
            assert_eq!(classes.into_iter().collect::<Vec<_>>(), vec![0, 1]);
        }
        assert!(BinarizationMap::preset("brain").is_err());
    }

    #[test]
    fn breast_row() {
        let m = BinarizationMap::preset("breast").unwrap();
        assert_eq!(m.class_of("benign").unwrap(), 0);
        assert_eq!(m.class_of("malignant").unwrap(), 1);
        assert!(matches!(m.class_of("weird"), Err(Error::UnmappedSublabel(s)) if s == "weird"));
    }

    #[test]
    fn one_sided_map_is_rejected() {
        assert!(BinarizationMap::new("x", [("a".to_string(), 0)]).is_err());
        assert!(BinarizationMap::new("x", [("a".to_string(), 0), ("b".to_string(), 2)]).is_err());
    }
}
