//! Synthetic scene graphs: the "images" that flow through generation,
//! correction and verification.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reals are stored on a 1e-6 grid so canonical text is stable.
pub const REAL_GRID: f64 = 1e6;

pub fn quantize(x: f64) -> f64 {
    let q = (x * REAL_GRID).round() / REAL_GRID;
    // -0.0 and 0.0 must serialize identically
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    /// Box of half-extent `half` centred at (cx, cy), clipped to the unit square.
    pub fn centered(cx: f64, cy: f64, half: f64) -> Self {
        BBox {
            x0: (cx - half).clamp(0.0, 1.0),
            y0: (cy - half).clamp(0.0, 1.0),
            x1: (cx + half).clamp(0.0, 1.0),
            y1: (cy + half).clamp(0.0, 1.0),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.x0) && unit(self.y0) && unit(self.x1) && unit(self.y1)
            && self.x0 <= self.x1
            && self.y0 <= self.y1
    }

    fn quantized(self) -> Self {
        BBox {
            x0: quantize(self.x0),
            y0: quantize(self.y0),
            x1: quantize(self.x1),
            y1: quantize(self.y1),
        }
    }

    fn key(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: String,
    pub color: String,
    pub bbox: BBox,
    pub z: i32,
}

impl SceneObject {
    pub fn new(class: impl Into<String>, color: impl Into<String>, bbox: BBox, z: i32) -> Self {
        SceneObject {
            class: class.into(),
            color: color.into(),
            bbox,
            z,
        }
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.z
            .cmp(&other.z)
            .then_with(|| self.class.cmp(&other.class))
            .then_with(|| self.color.cmp(&other.color))
            .then_with(|| {
                self.bbox
                    .key()
                    .iter()
                    .zip(other.bbox.key().iter())
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
    }
}

/// Where a scene came from: which run, chain, iteration and backend role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub run_seed: u64,
    pub chain: u64,
    pub iteration: u64,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub objects: Vec<SceneObject>,
    pub quality: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Lowercase hex SHA-256 of a scene's canonical content.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContentHash(pub String);

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Serialize)]
struct SceneContent<'a> {
    objects: &'a [SceneObject],
    quality: f64,
}

impl SceneGraph {
    pub fn empty() -> Self {
        SceneGraph {
            objects: Vec::new(),
            quality: 0.0,
            provenance: None,
        }
    }

    pub fn new(objects: Vec<SceneObject>, quality: f64) -> Self {
        SceneGraph {
            objects,
            quality,
            provenance: None,
        }
        .canonical()
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.quality) {
            return Err(Error::invalid(format!("scene quality {} outside [0,1]", self.quality)));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if !obj.bbox.is_valid() {
                return Err(Error::invalid(format!("object {i} bbox {:?} outside the unit square", obj.bbox)));
            }
        }
        Ok(())
    }

    /// Quantize reals and sort objects by (z, class, color, bbox).
    pub fn canonicalize(&mut self) {
        for obj in &mut self.objects {
            obj.bbox = obj.bbox.quantized();
        }
        self.quality = quantize(self.quality);
        self.objects.sort_by(SceneObject::canonical_cmp);
    }

    pub fn canonical(mut self) -> Self {
        self.canonicalize();
        self
    }

    /// Instances of `class`, in canonical order.
    pub fn instances<'a>(&'a self, class: &'a str) -> impl Iterator<Item = &'a SceneObject> + 'a {
        self.objects.iter().filter(move |o| o.class == class)
    }

    pub fn count_of(&self, class: &str) -> usize {
        self.instances(class).count()
    }

    pub fn canonical_serialize(&self) -> Vec<u8> {
        serde_json::to_vec(&self.clone().canonical()).expect("scene serializes")
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let scene: SceneGraph = serde_json::from_slice(bytes)?;
        scene.validate()?;
        Ok(scene)
    }

    /// Hash of objects and quality; provenance does not participate.
    pub fn content_hash(&self) -> ContentHash {
        let canonical = self.clone().canonical();
        let content = SceneContent {
            objects: &canonical.objects,
            quality: canonical.quality,
        };
        let bytes = serde_json::to_vec(&content).expect("scene serializes");
        ContentHash(hex::encode(Sha256::digest(&bytes)))
    }
}
