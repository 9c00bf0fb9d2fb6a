use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NetworkError;

/// Cumulative spatial downsampling from network input to prediction grid.
pub const DOWNSAMPLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { filters: usize, size: usize, stride: usize, pad: usize },
    BatchNorm,
    Leaky { slope: f64 },
    MaxPool { size: usize, stride: usize },
    /// 1x1 convolution with bias producing `B * (5 + C)` channels.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    /// Normalized anchor shapes; their count is B.
    pub anchors: Vec<(f64, f64)>,
    /// Class names; their count is C.
    pub class_names: Vec<String>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkConfig {
    /// The default miniature backbone: seven 3x3 conv/batch-norm/leaky blocks
    /// (16, 32, 64, 64, 128, 128, 256 filters) with a 2x2 max-pool after each
    /// of the first four, followed by the 1x1 detection head.
    pub fn tiny16(input_size: usize, anchors: Vec<(f64, f64)>, class_names: Vec<String>) -> Self {
        Self::tiny16_with_widths(input_size, anchors, class_names, [16, 32, 64, 64, 128, 128, 256])
    }

    pub fn tiny16_with_widths(
        input_size: usize,
        anchors: Vec<(f64, f64)>,
        class_names: Vec<String>,
        widths: [usize; 7],
    ) -> Self {
        let mut layers = Vec::new();
        for (i, &f) in widths.iter().enumerate() {
            layers.push(LayerSpec::Conv { filters: f, size: 3, stride: 1, pad: 1 });
            layers.push(LayerSpec::BatchNorm);
            layers.push(LayerSpec::Leaky { slope: 0.1 });
            if i < 4 {
                layers.push(LayerSpec::MaxPool { size: 2, stride: 2 });
            }
        }
        layers.push(LayerSpec::Head);
        Self { input_size, anchors, class_names, layers }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Channels per anchor: four box terms, objectness and class scores.
    pub fn values_per_anchor(&self) -> usize {
        5 + self.num_classes()
    }

    pub fn head_channels(&self) -> usize {
        self.num_anchors() * self.values_per_anchor()
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / DOWNSAMPLE
    }

    /// Product of all conv and pool strides.
    pub fn downsample(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { stride, .. } | LayerSpec::MaxPool { stride, .. } => *stride,
                _ => 1,
            })
            .product()
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::Config(m));
        if self.anchors.is_empty() {
            return bad("at least one anchor is required".into());
        }
        if self.class_names.is_empty() {
            return bad("at least one class is required".into());
        }
        if self.input_size == 0 || self.input_size % DOWNSAMPLE != 0 {
            return bad(format!("input size {} is not a positive multiple of {DOWNSAMPLE}", self.input_size));
        }
        if self.downsample() != DOWNSAMPLE {
            return bad(format!("layers downsample by {}, expected {DOWNSAMPLE}", self.downsample()));
        }
        if self.layers.last() != Some(&LayerSpec::Head) {
            return bad("the last layer must be the detection head".into());
        }
        if self.layers.iter().filter(|l| **l == LayerSpec::Head).count() != 1 {
            return bad("exactly one detection head is allowed".into());
        }
        for l in &self.layers {
            match *l {
                LayerSpec::Conv { filters, size, stride, pad } => {
                    if filters == 0 || size == 0 || stride == 0 {
                        return bad(format!("invalid conv layer {l:?}"));
                    }
                    // spatial size must shrink exactly by the stride
                    if !(size <= 2 * pad + stride && 2 * pad < size) {
                        return bad(format!("conv layer {l:?} does not preserve the grid alignment"));
                    }
                }
                LayerSpec::MaxPool { size, stride } => {
                    if size != stride || size == 0 {
                        return bad(format!("pool layer {l:?} must have size == stride"));
                    }
                }
                LayerSpec::Leaky { slope } => {
                    if !(0.0..1.0).contains(&slope) {
                        return bad(format!("leaky slope {slope} outside [0, 1)"));
                    }
                }
                _ => {}
            }
        }
        for &(w, h) in &self.anchors {
            if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
                return bad(format!("anchor ({w}, {h}) outside (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NetworkError> {
        serde_json::from_str(s).map_err(|e| NetworkError::Config(e.to_string()))
    }

    /// Stable 64-bit digest of the serialized config.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_json().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}
