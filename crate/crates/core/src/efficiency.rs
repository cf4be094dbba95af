//! Closed-form parameter and FLOP accounting for the transformer head and
//! the deconvolution heatmap head it replaces.
//!
//! FLOPs count one multiply-add as 2 operations over matrix products and
//! convolutions only; softmax, normalization, activations, bias adds and the
//! heatmap soft-argmax are excluded.

use std::fmt::Write as _;

use crate::head::HeadConfig;

/// Deconvolution baseline: `channels.len()` stride-2 transposed convolutions
/// followed by a 1×1 convolution to `n_joints · depth_bins` heatmap channels.
#[derive(Debug, Clone, PartialEq)]
pub struct DeconvConfig {
    pub in_channels: u64,
    pub channels: Vec<u64>,
    pub kernel: u64,
    pub stride: u64,
    pub input_hw: (u64, u64),
    pub n_joints: u64,
    pub depth_bins: u64,
}

impl Default for DeconvConfig {
    fn default() -> Self {
        Self {
            in_channels: 512,
            channels: vec![256, 256, 256],
            kernel: 4,
            stride: 2,
            input_hw: (8, 8),
            n_joints: 24,
            depth_bins: 64,
        }
    }
}

impl DeconvConfig {
    pub fn heatmap_channels(&self) -> u64 {
        self.n_joints * self.depth_bins
    }

    /// Spatial size after every transposed convolution.
    pub fn output_hw(&self) -> (u64, u64) {
        let s = self.stride.pow(self.channels.len() as u32);
        (self.input_hw.0 * s, self.input_hw.1 * s)
    }
}

fn mha_params(d: u64, h: u64) -> u64 {
    let dh = d / h;
    h * 3 * (d * dh + dh) + (d * d + d)
}

fn ffn_params(d: u64) -> u64 {
    3 * (d * d + d)
}

/// Exact learnable-scalar count of the transformer head.
pub fn transformer_head_params(cfg: &HeadConfig) -> u64 {
    let (d, h) = (cfg.width as u64, cfg.heads as u64);
    let input = cfg.c_in as u64 * d + d;
    let pos = cfg.n_patches as u64 * d;
    let emb = cfg.n_joints as u64 * d + 3 * d;
    let block = 3 * mha_params(d, h) + 3 * (2 * d) + 2 * ffn_params(d);
    let beta = cfg.beta_dim as u64;
    let outputs = (d * 3 + 3) + (d * 2 + 2) + (d * beta + beta);
    input + pos + emb + cfg.layers as u64 * block + outputs
}

pub fn deconv_head_params(dc: &DeconvConfig) -> u64 {
    let k2 = dc.kernel * dc.kernel;
    let mut c_prev = dc.in_channels;
    let mut total = 0;
    for &c in &dc.channels {
        total += k2 * c_prev * c + c;
        c_prev = c;
    }
    let heat = dc.heatmap_channels();
    total + c_prev * heat + heat
}

fn mha_flops(m: u64, n: u64, d: u64) -> u64 {
    // projections: q over m rows, k and v over n rows, output over m rows
    let proj = 2 * m * d * d + 4 * n * d * d + 2 * m * d * d;
    // scores and weighted sum, summed over heads
    let attn = 4 * m * n * d;
    proj + attn
}

/// FLOPs of one eval-mode forward pass over all patches.
pub fn transformer_head_flops(cfg: &HeadConfig) -> u64 {
    let d = cfg.width as u64;
    let n = cfg.n_patches as u64;
    let m = cfg.n_queries() as u64;
    let ffn = |rows: u64| 3 * 2 * rows * d * d;
    let input = 2 * n * cfg.c_in as u64 * d;
    let block = mha_flops(n, n, d) + ffn(n) + mha_flops(m, m, d) + mha_flops(m, n, d) + ffn(m);
    let outputs = 2 * d * (cfg.n_joints as u64 * 3 + cfg.n_twists as u64 * 2 + cfg.beta_dim as u64);
    input + cfg.layers as u64 * block + outputs
}

/// FLOPs of one forward pass of the deconvolution head. A stride-`s`
/// transposed convolution does `k²·c_in·c_out` multiply-adds per input pixel.
pub fn deconv_head_flops(dc: &DeconvConfig) -> u64 {
    let k2 = dc.kernel * dc.kernel;
    let (mut hgt, mut wid) = dc.input_hw;
    let mut c_prev = dc.in_channels;
    let mut total = 0;
    for &c in &dc.channels {
        total += 2 * k2 * c_prev * c * hgt * wid;
        hgt *= dc.stride;
        wid *= dc.stride;
        c_prev = c;
    }
    total + 2 * c_prev * dc.heatmap_channels() * hgt * wid
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyReport {
    pub transformer_head_params: u64,
    pub deconv_head_params: u64,
    /// `deconv / transformer`
    pub param_ratio: f64,
    pub transformer_head_flops: u64,
    pub deconv_head_flops: u64,
    /// `deconv / transformer`
    pub flop_ratio: f64,
    pub assumptions: Vec<(String, String)>,
}

pub fn efficiency_report(cfg: &HeadConfig, dc: &DeconvConfig) -> EfficiencyReport {
    let tp = transformer_head_params(cfg);
    let dp = deconv_head_params(dc);
    let tf = transformer_head_flops(cfg);
    let df = deconv_head_flops(dc);
    let channels = dc.channels.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    let assumptions = [
        ("head.layers", cfg.layers.to_string()),
        ("head.heads", cfg.heads.to_string()),
        ("head.width", cfg.width.to_string()),
        ("head.n_patches", cfg.n_patches.to_string()),
        ("head.c_in", cfg.c_in.to_string()),
        ("head.ffn_layers", "3".to_string()),
        ("head.n_queries", cfg.n_queries().to_string()),
        ("deconv.in_channels", dc.in_channels.to_string()),
        ("deconv.channels", channels),
        ("deconv.kernel", dc.kernel.to_string()),
        ("deconv.stride", dc.stride.to_string()),
        ("deconv.input_hw", format!("{}x{}", dc.input_hw.0, dc.input_hw.1)),
        ("deconv.output_hw", format!("{}x{}", dc.output_hw().0, dc.output_hw().1)),
        ("deconv.heatmap_channels", format!("{}x{}", dc.n_joints, dc.depth_bins)),
        ("deconv.source", "conventional predecessor configuration, not a published value".to_string()),
        ("flops.convention", "multiply-add = 2; matmul/conv only".to_string()),
        ("claim.gpu_memory", "not reproduced (hardware-bound)".to_string()),
        ("claim.epoch_time", "not reproduced (hardware-bound)".to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    EfficiencyReport {
        transformer_head_params: tp,
        deconv_head_params: dp,
        param_ratio: dp as f64 / tp as f64,
        transformer_head_flops: tf,
        deconv_head_flops: df,
        flop_ratio: df as f64 / tf as f64,
        assumptions,
    }
}

impl EfficiencyReport {
    /// One `key<TAB>value` line per field, in a fixed order.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "transformer_head_params\t{}", self.transformer_head_params);
        let _ = writeln!(s, "deconv_head_params\t{}", self.deconv_head_params);
        let _ = writeln!(s, "param_ratio\t{:.6}", self.param_ratio);
        let _ = writeln!(s, "transformer_head_flops\t{}", self.transformer_head_flops);
        let _ = writeln!(s, "deconv_head_flops\t{}", self.deconv_head_flops);
        let _ = writeln!(s, "flop_ratio\t{:.6}", self.flop_ratio);
        for (k, v) in &self.assumptions {
            let _ = writeln!(s, "assumption.{k}\t{v}");
        }
        s
    }
}
