use std::fmt;
use std::str::FromStr;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible slice edge, in pixels.
pub const MIN_SLICE_EDGE: u32 = 32;

macro_rules! closed_enum {
    ($(#[$meta:meta])* $name:ident, $kind:literal, [$($variant:ident => $token:literal),+ $(,)?]) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: [$name; [$($token),+].len()] = [$($name::$variant),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(index: usize) -> Option<Self> {
                Self::ALL.get(index).copied()
            }

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let lower = s.trim().to_ascii_lowercase();
                match lower.as_str() {
                    $($token => Ok($name::$variant),)+
                    _ => Err(Error::UnknownToken { kind: $kind, token: s.to_string() }),
                }
            }
        }
    };
}

closed_enum!(
    /// Anatomical imaging plane of a slice.
    Orientation, "orientation", [Axial => "axial", Sagittal => "sagittal", Coronal => "coronal"]
);

closed_enum!(
    /// Tumor class. The discriminant is the class index used by every model head.
    TumorClass, "class", [Glioma => "glioma", Meningioma => "meningioma", Pituitary => "pituitary"]
);

closed_enum!(Domain, "domain", [Source => "source", Target => "target"]);

closed_enum!(Split, "split", [Train => "train", Val => "val", Test => "test"]);

/// Number of tumor classes.
pub const NUM_CLASSES: usize = 3;
/// Number of orientations.
pub const NUM_ORIENTATIONS: usize = 3;

/// One grayscale 2-D slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub id: String,
    pub pixels: GrayImage,
    pub domain: Domain,
    pub class_label: Option<TumorClass>,
    pub orientation_label: Option<Orientation>,
}

impl SliceImage {
    pub fn new(
        id: impl Into<String>,
        pixels: GrayImage,
        domain: Domain,
        class_label: Option<TumorClass>,
        orientation_label: Option<Orientation>,
    ) -> Result<Self> {
        let id = id.into();
        if pixels.width() < MIN_SLICE_EDGE || pixels.height() < MIN_SLICE_EDGE {
            return Err(Error::InvalidInput(format!(
                "slice {id:?} is {}x{}, minimum edge is {MIN_SLICE_EDGE}",
                pixels.width(),
                pixels.height()
            )));
        }
        Ok(Self {
            id,
            pixels,
            domain,
            class_label,
            orientation_label,
        })
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}
