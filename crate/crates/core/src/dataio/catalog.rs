use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub prompts: Vec<String>,
    pub color: [u8; 3],
}

/// Class names, prompt text and palette colours.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCatalog {
    pub classes: Vec<ClassEntry>,
}

/// Prompt templates. `P1`..`P4` wrap the class name; `P5` uses the
/// catalog's own per-class descriptions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptTemplate {
    #[default]
    P1,
    P2,
    P3,
    P4,
    P5,
}

impl PromptTemplate {
    pub const ALL: [PromptTemplate; 5] = [Self::P1, Self::P2, Self::P3, Self::P4, Self::P5];

    /// Renders the template for `name`. `None` for `P5`, whose text comes
    /// from the catalog.
    pub fn render(self, name: &str) -> Option<String> {
        match self {
            Self::P1 => Some(format!("a patch of a {name}.")),
            Self::P2 => Some(format!("a nice patch of a {name}.")),
            Self::P3 => Some(format!("a fusion patch of a {name}.")),
            Self::P4 => Some(format!(
                "a multimodal fusion patch of a {name} with strong semantic information."
            )),
            Self::P5 => None,
        }
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::P1 => "p1",
            Self::P2 => "p2",
            Self::P3 => "p3",
            Self::P4 => "p4",
            Self::P5 => "p5",
        };
        f.write_str(s)
    }
}

impl FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(Self::P1),
            "p2" => Ok(Self::P2),
            "p3" => Ok(Self::P3),
            "p4" => Ok(Self::P4),
            "p5" => Ok(Self::P5),
            other => Err(Error::invalid(format!("unknown prompt template `{other}`"))),
        }
    }
}

const SYNTH_NAMES: [&str; 16] = [
    "grass",
    "tree",
    "water",
    "soil",
    "road",
    "building",
    "railway",
    "parking",
    "highway",
    "residential",
    "commercial",
    "crops",
    "shrub",
    "sand",
    "wetland",
    "forest",
];

const SYNTH_COLORS: [[u8; 3]; 16] = [
    [0, 205, 0],
    [0, 139, 0],
    [0, 0, 255],
    [160, 82, 45],
    [128, 128, 128],
    [255, 0, 0],
    [255, 255, 0],
    [255, 165, 0],
    [128, 0, 128],
    [255, 192, 203],
    [0, 255, 255],
    [173, 255, 47],
    [85, 107, 47],
    [238, 214, 175],
    [70, 130, 180],
    [34, 85, 34],
];

impl ClassCatalog {
    pub fn new(classes: Vec<ClassEntry>) -> Result<Self> {
        let c = Self { classes };
        c.validate()?;
        Ok(c)
    }

    /// Catalog for `k` synthetic classes, prompts filled from `P1`.
    pub fn synthetic(k: usize) -> Self {
        let classes = (0..k)
            .map(|i| {
                let name = SYNTH_NAMES
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("class{i}"));
                let color = SYNTH_COLORS.get(i).copied().unwrap_or_else(|| {
                    let h = crate::numerics::splitmix64(i as u64).to_le_bytes();
                    [h[0] | 0x20, h[1] | 0x20, h[2] | 0x20]
                });
                ClassEntry {
                    prompts: vec![PromptTemplate::P1.render(&name).expect("p1 renders")],
                    name,
                    color,
                }
            })
            .collect();
        Self { classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::invalid("catalog needs at least two classes"));
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::invalid(format!("duplicate class name `{}`", c.name)));
            }
            if c.prompts.is_empty() {
                return Err(Error::invalid(format!("class `{}` has no prompts", c.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn palette(&self) -> Vec<[u8; 3]> {
        self.classes.iter().map(|c| c.color).collect()
    }

    /// Prompt strings for `class` under `template`.
    pub fn prompts(&self, class: usize, template: PromptTemplate) -> Result<Vec<String>> {
        let entry = self
            .classes
            .get(class)
            .ok_or_else(|| Error::invalid(format!("class {class} not in catalog")))?;
        let prompts = match template.render(&entry.name) {
            Some(p) => vec![p],
            None => entry.prompts.clone(),
        };
        if prompts.is_empty() {
            return Err(Error::invalid(format!("class `{}` has no prompts", entry.name)));
        }
        Ok(prompts)
    }

    /// Every prompt any template can produce, for vocabulary building.
    pub fn corpus(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.classes {
            out.extend(c.prompts.iter().cloned());
            for t in PromptTemplate::ALL {
                out.extend(t.render(&c.name));
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
