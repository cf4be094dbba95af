use lifthead::efficiency::{
    deconv_head_flops, deconv_head_params, efficiency_report, transformer_head_flops, transformer_head_params,
    DeconvConfig,
};
use lifthead::nn::{Init, ParamSink};
use lifthead::{HeadConfig, LiftingHead, ParamId, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sums the element counts of every declared tensor without allocating.
#[derive(Default)]
struct Tally {
    tensors: usize,
    elements: u64,
}

impl ParamSink for Tally {
    fn declare(&mut self, _name: String, shape: &[usize], _init: Init) -> Result<ParamId> {
        self.elements += shape.iter().product::<usize>() as u64;
        self.tensors += 1;
        let mut store = lifthead::ParamStore::<f32>::new();
        store.insert("slot", lifthead::Tensor::zeros(&[1]))
    }
}

fn declared_elements(cfg: &HeadConfig) -> u64 {
    let mut tally = Tally::default();
    LiftingHead::declare(cfg, &mut tally).unwrap();
    tally.elements
}

#[test]
fn closed_form_matches_declared_model_for_random_configs() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let heads = r.gen_range(1..5);
        let cfg = HeadConfig {
            layers: r.gen_range(1..5),
            heads,
            width: heads * r.gen_range(1..6) * 2,
            n_patches: r.gen_range(1..20),
            c_in: r.gen_range(1..40),
            n_joints: r.gen_range(3..30),
            beta_dim: r.gen_range(1..12),
            ..HeadConfig::paper()
        };
        let cfg = HeadConfig {
            n_twists: r.gen_range(1..cfg.n_joints),
            ..cfg
        };
        assert_eq!(transformer_head_params(&cfg), declared_elements(&cfg), "{cfg:?}");
    }
    let paper = HeadConfig::paper();
    assert_eq!(transformer_head_params(&paper), declared_elements(&paper));
}

#[test]
fn microscopic_model_counted_by_hand() {
    let cfg = HeadConfig {
        layers: 1,
        heads: 1,
        width: 2,
        n_patches: 1,
        c_in: 1,
        n_joints: 2,
        n_twists: 1,
        beta_dim: 1,
        ..HeadConfig::paper()
    };
    // input 1·2+2, pos 2, embeddings 2·2+3·2,
    // block: 3 attentions of (3·(2·2+2) + 2·2+2), 3 norms of 4, 2 FFNs of 3·(2·2+2),
    // outputs (2·3+3) + (2·2+2) + (2·1+1)
    let want = 4 + 2 + 10 + (3 * 24 + 12 + 36) + (9 + 6 + 3);
    assert_eq!(transformer_head_params(&cfg), want);
    let (_, store) = LiftingHead::init::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(store.numel() as u64, want);
}

#[test]
fn each_block_adds_a_constant() {
    let counts: Vec<u64> = (1..8)
        .map(|layers| transformer_head_params(&HeadConfig { layers, ..HeadConfig::paper() }))
        .collect();
    let step = counts[1] - counts[0];
    assert!(step > 0);
    assert!(counts.windows(2).all(|w| w[1] - w[0] == step));
}

#[test]
fn deconv_params_hand_expanded() {
    let want = (16 * 512 * 256 + 256) + 2 * (16 * 256 * 256 + 256) + (256 * 24 * 64 + 24 * 64);
    assert_eq!(deconv_head_params(&DeconvConfig::default()), want);
}

#[test]
fn deconv_params_scale_quadratically_in_width() {
    let base = DeconvConfig::default();
    let doubled = DeconvConfig {
        in_channels: 2 * base.in_channels,
        channels: base.channels.iter().map(|c| 2 * c).collect(),
        depth_bins: 2 * base.depth_bins,
        ..base.clone()
    };
    let biases: u64 = base.channels.iter().sum::<u64>() + base.heatmap_channels();
    let p = deconv_head_params(&base);
    assert_eq!(deconv_head_params(&doubled), 4 * (p - biases) + 2 * biases);
}

/// Multiply-adds of a literal scatter-style transposed convolution.
fn transposed_conv_macs(c_in: u64, c_out: u64, k: u64, stride: u64, h: u64, w: u64) -> (u64, u64, u64) {
    let (mut macs, mut max_y, mut max_x) = (0, 0, 0);
    for iy in 0..h {
        for ix in 0..w {
            for ky in 0..k {
                for kx in 0..k {
                    // padding (k - stride) / 2 on each side
                    let oy = (iy * stride + ky) as i64 - ((k - stride) / 2) as i64;
                    let ox = (ix * stride + kx) as i64 - ((k - stride) / 2) as i64;
                    if oy < 0 || ox < 0 || oy >= (h * stride) as i64 || ox >= (w * stride) as i64 {
                        continue;
                    }
                    max_y = max_y.max(oy as u64 + 1);
                    max_x = max_x.max(ox as u64 + 1);
                    macs += c_in * c_out;
                }
            }
        }
    }
    (macs, max_y, max_x)
}

#[test]
fn deconv_flops_match_scatter_loop_on_unpadded_taps() {
    // every tap of every input pixel does c_in·c_out multiply-adds; the
    // closed form counts all k² taps, border taps included
    let dc = DeconvConfig {
        in_channels: 3,
        channels: vec![4, 5],
        kernel: 4,
        stride: 2,
        input_hw: (3, 2),
        n_joints: 2,
        depth_bins: 3,
    };
    let mut total = 0;
    let (mut h, mut w, mut c_prev) = (3, 2, 3);
    for &c in &dc.channels {
        let all_taps = h * w * dc.kernel * dc.kernel * c_prev * c;
        let (inside, oh, ow) = transposed_conv_macs(c_prev, c, dc.kernel, dc.stride, h, w);
        assert!(inside <= all_taps);
        assert_eq!((oh, ow), (h * dc.stride, w * dc.stride));
        total += 2 * all_taps;
        h *= dc.stride;
        w *= dc.stride;
        c_prev = c;
    }
    total += 2 * h * w * c_prev * dc.heatmap_channels();
    assert_eq!(deconv_head_flops(&dc), total);
    assert_eq!(dc.output_hw(), (12, 8));
}

#[test]
fn transformer_flops_hand_expanded_for_small_head() {
    let cfg = HeadConfig {
        layers: 1,
        heads: 2,
        width: 4,
        n_patches: 3,
        c_in: 5,
        n_joints: 2,
        n_twists: 1,
        beta_dim: 1,
        ..HeadConfig::paper()
    };
    let (d, n, m) = (4u64, 3u64, 4u64);
    let macs = |a: u64, b: u64, c: u64| 2 * a * b * c;
    let attn = |rows_q: u64, rows_kv: u64| {
        macs(rows_q, d, d) + 2 * macs(rows_kv, d, d) + macs(rows_q, d, d) // q, k, v, out
            + macs(rows_q, d, rows_kv) + macs(rows_q, rows_kv, d) // scores, weighted sum
    };
    let ffn = |rows: u64| 3 * macs(rows, d, d);
    let want = macs(n, 5, d)
        + attn(n, n)
        + ffn(n)
        + attn(m, m)
        + attn(m, n)
        + ffn(m)
        + macs(2, d, 3)
        + macs(1, d, 2)
        + macs(1, d, 1);
    assert_eq!(transformer_head_flops(&cfg), want);
}

#[test]
fn report_is_deterministic_and_self_consistent() {
    let cfg = HeadConfig::paper();
    let dc = DeconvConfig::default();
    let a = efficiency_report(&cfg, &dc).to_tsv();
    let b = efficiency_report(&cfg, &dc).to_tsv();
    assert_eq!(a, b);

    let field = |key: &str| -> String {
        a.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}\t")))
            .unwrap_or_else(|| panic!("missing {key}"))
            .to_string()
    };
    let tp: f64 = field("transformer_head_params").parse().unwrap();
    let dp: f64 = field("deconv_head_params").parse().unwrap();
    let tf: f64 = field("transformer_head_flops").parse().unwrap();
    let df: f64 = field("deconv_head_flops").parse().unwrap();
    assert_eq!(field("param_ratio"), format!("{:.6}", dp / tp));
    assert_eq!(field("flop_ratio"), format!("{:.6}", df / tf));
    assert!(a.lines().all(|l| l.split('\t').count() == 2));
    assert!(a.contains("assumption.deconv.channels\t256,256,256"));
}
