//! Random circular-inclusion phantoms.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EitError, Result};
use crate::fem::DEFAULT_BACKGROUND;
use crate::mesh::{paint_phantom, Circle, ConductivityField, Mesh};

pub const CENTER_RANGE: (f64, f64) = (-0.55, 0.55);
pub const RADIUS_RANGE: (f64, f64) = (0.1, 0.3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhantomKind {
    Two,
    Four,
}

impl PhantomKind {
    /// Inclusion conductivities, in drawing order.
    pub fn conductivities(self) -> &'static [f64] {
        match self {
            PhantomKind::Two => &[0.5, 1.5],
            PhantomKind::Four => &[0.01, 0.1, 0.5, 1.5],
        }
    }

    pub fn code(self) -> u32 {
        match self {
            PhantomKind::Two => 2,
            PhantomKind::Four => 4,
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhantomKind::Two => "two",
            PhantomKind::Four => "four",
        })
    }
}

impl FromStr for PhantomKind {
    type Err = EitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two" | "2" => Ok(PhantomKind::Two),
            "four" | "4" => Ok(PhantomKind::Four),
            _ => Err(EitError::invalid(format!("unknown phantom kind `{s}` (expected two or four)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub circles: Vec<Circle>,
    pub background: f64,
}

impl PhantomSpec {
    pub fn paint(&self, mesh: &Mesh) -> Result<ConductivityField> {
        paint_phantom(mesh, self.background, &self.circles)
    }
}

/// Draw a phantom: centres uniform on the square `CENTER_RANGE²`, radii
/// uniform on `RADIUS_RANGE`. A radius that would push the circle out of the
/// unit disk is redrawn; the centre is kept.
pub fn sample_phantom(kind: PhantomKind, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let circles = kind
        .conductivities()
        .iter()
        .map(|&conductivity| {
            let center = [
                rng.random_range(CENTER_RANGE.0..CENTER_RANGE.1),
                rng.random_range(CENTER_RANGE.0..CENTER_RANGE.1),
            ];
            let room = 1.0 - center[0].hypot(center[1]);
            let radius = loop {
                let r = rng.random_range(RADIUS_RANGE.0..RADIUS_RANGE.1);
                if r <= room {
                    break r;
                }
            };
            Circle { center, radius, conductivity }
        })
        .collect();
    PhantomSpec {
        circles,
        background: DEFAULT_BACKGROUND,
    }
}
