use serde::{Deserialize, Serialize};

use crate::error::{PctError, Result};
use crate::graph::{validate_ks, DEFAULT_KS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Three graph inception convolutions.
    Gin,
    /// Shared per-point MLP followed by max pooling.
    #[serde(rename = "pointnet")]
    PointNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    FullyConnected,
    Folding,
}

/// Frame in which edge weights `exp(-|p_i - p_j|^2)` are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphFrame {
    /// Normalized unit-cube coordinates seen by the encoder.
    Local,
    /// Meters, i.e. unit-cube coordinates scaled by the voxel size.
    World,
}

/// Architecture of the voxel codec. Widths list hidden layers only; input
/// and output widths follow from the code length and point dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub code_len: usize,
    pub ks: Vec<usize>,
    pub encoder: EncoderKind,
    pub aggregation: Aggregation,
    pub normalization: bool,
    /// Output widths of the first two GIN layers; the third emits `code_len`.
    pub gin_widths: Vec<usize>,
    /// Layer widths of each branch MLP `h_w`; the last is the branch output.
    pub branch_widths: Vec<usize>,
    /// Hidden widths of the combiner `g_w`; empty means one linear layer.
    pub combiner_widths: Vec<usize>,
    pub norm_widths: Vec<usize>,
    pub pointnet_widths: Vec<usize>,
    pub decoder: DecoderKind,
    /// Output points of the fully connected decoder.
    pub decoder_points: usize,
    pub fc_widths: Vec<usize>,
    /// The folding decoder emits `grid_side^2` points.
    pub grid_side: usize,
    pub fold_widths: Vec<usize>,
    pub graph_frame: GraphFrame,
    pub voxel_size: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            code_len: 18,
            ks: DEFAULT_KS.to_vec(),
            encoder: EncoderKind::Gin,
            aggregation: Aggregation::Mean,
            normalization: true,
            gin_widths: vec![32, 64],
            branch_widths: vec![16, 16],
            combiner_widths: Vec::new(),
            norm_widths: vec![32, 64],
            pointnet_widths: vec![32, 64],
            decoder: DecoderKind::FullyConnected,
            decoder_points: 128,
            fc_widths: vec![256, 256],
            grid_side: 12,
            fold_widths: vec![64, 64],
            graph_frame: GraphFrame::Local,
            voxel_size: [1.0, 1.0, 10.0],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PctError::Config(m));
        if self.code_len == 0 {
            return bad("code_len must be at least 1".into());
        }
        validate_ks(&self.ks)?;
        for (name, w) in [
            ("gin_widths", &self.gin_widths),
            ("branch_widths", &self.branch_widths),
            ("combiner_widths", &self.combiner_widths),
            ("norm_widths", &self.norm_widths),
            ("pointnet_widths", &self.pointnet_widths),
            ("fc_widths", &self.fc_widths),
            ("fold_widths", &self.fold_widths),
        ] {
            if w.contains(&0) {
                return bad(format!("{name} entries must be positive, got {w:?}"));
            }
        }
        if self.gin_widths.len() != 2 {
            return bad(format!(
                "gin_widths must list the two hidden GIN layer widths, got {:?}",
                self.gin_widths
            ));
        }
        if self.branch_widths.is_empty() {
            return bad("branch_widths must not be empty".into());
        }
        if self.norm_widths.is_empty() {
            return bad("norm_widths must not be empty".into());
        }
        if self.decoder_points == 0 || self.grid_side < 2 {
            return bad("decoder_points must be >= 1 and grid_side >= 2".into());
        }
        if !self.voxel_size.iter().all(|s| s.is_finite() && *s > 0.0) {
            return bad(format!("voxel_size must be positive, got {:?}", self.voxel_size));
        }
        Ok(())
    }

    /// Number of points the decoder emits.
    pub fn output_points(&self) -> usize {
        match self.decoder {
            DecoderKind::FullyConnected => self.decoder_points,
            DecoderKind::Folding => self.grid_side * self.grid_side,
        }
    }

    /// Layer input/output widths of the three GIN layers.
    pub fn gin_layer_widths(&self) -> [(usize, usize); 3] {
        let (a, b) = (self.gin_widths[0], self.gin_widths[1]);
        [(3, a), (a, b), (b, self.code_len)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.output_points(), 128);
        let f = ModelConfig { decoder: DecoderKind::Folding, ..c };
        assert_eq!(f.output_points(), 144);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = ModelConfig { code_len: 9, encoder: EncoderKind::PointNet, ..Default::default() };
        let text = toml::to_string(&c).unwrap();
        assert!(text.contains("encoder = \"pointnet\""));
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<ModelConfig>("bogus = 1").is_err());
        let partial: ModelConfig = toml::from_str("decoder = \"folding\"").unwrap();
        assert_eq!(partial.decoder, DecoderKind::Folding);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ModelConfig { code_len: 0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { ks: vec![4, 1], ..Default::default() }.validate().is_err());
        assert!(ModelConfig { fc_widths: vec![0], ..Default::default() }.validate().is_err());
    }
}
