//! Execution-free parameter and MAC accounting.
//!
//! Every row mirrors one entry of the model's layer census. Convolutions
//! count `Cout·Cin·K²·Hout·Wout` multiply-accumulates (`C·K²·Hout·Wout` when
//! depthwise); batch norm, activations, pooling, upsampling, additions and
//! softmax count one op per output element; global average pooling counts
//! one op per input element. One MAC is reported as one FLOP.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::model::{block_name, ModelConfig, Variant, INPUT_CHANNELS};
use crate::nn::attention_hidden;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub variant: Variant,
    pub stage_widths: Vec<usize>,
    pub pfc_kernel: usize,
    /// Single-image input, C×H×W.
    pub input: [usize; 3],
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
}

/// Receives one (name, params, macs) triple per census entry.
trait Sink {
    fn row(&mut self, name: impl FnOnce() -> String, params: u64, macs: u64);
}

#[derive(Default)]
struct Totals {
    params: u64,
    macs: u64,
}

impl Sink for Totals {
    fn row(&mut self, _: impl FnOnce() -> String, params: u64, macs: u64) {
        self.params += params;
        self.macs += macs;
    }
}

impl Sink for Vec<CostRow> {
    fn row(&mut self, name: impl FnOnce() -> String, params: u64, macs: u64) {
        self.push(CostRow { name: name(), params, macs });
    }
}

/// Parameters and MACs of a stride-1 `k×k` convolution with bias on an
/// `h×w` input padded to keep its extent.
pub fn conv_cost(cin: usize, cout: usize, k: usize, h: usize, w: usize) -> (u64, u64) {
    let weights = (cin * cout * k * k) as u64;
    (weights + cout as u64, weights * (h * w) as u64)
}

/// Same as [`conv_cost`] for one filter per channel.
pub fn depthwise_cost(c: usize, k: usize, h: usize, w: usize) -> (u64, u64) {
    let weights = (c * k * k) as u64;
    (weights + c as u64, weights * (h * w) as u64)
}

/// Trainable scalars of a depthwise `k×k` plus pointwise pair over `c` channels.
pub fn separable_params(c: usize, k: usize) -> u64 {
    depthwise_cost(c, k, 1, 1).0 + conv_cost(c, c, 1, 1, 1).0
}

/// Trainable scalars of the dense `k×k` convolution the separable pair replaces.
pub fn dense_params(c: usize, k: usize) -> u64 {
    conv_cost(c, c, k, 1, 1).0
}

struct Walker<'a, S: Sink> {
    sink: &'a mut S,
}

impl<S: Sink> Walker<'_, S> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, hw: (usize, usize)) {
        let (p, m) = conv_cost(cin, cout, k, hw.0, hw.1);
        self.sink.row(|| name.to_owned(), p, m);
    }

    fn elementwise(&mut self, name: &str, suffix: &str, params: u64, elements: usize) {
        self.sink.row(|| format!("{name}{suffix}"), params, elements as u64);
    }

    fn unit_tail(&mut self, name: &str, c: usize, hw: (usize, usize), relu: bool) {
        let e = c * hw.0 * hw.1;
        self.elementwise(name, ".bn", 2 * c as u64, e);
        if relu {
            self.elementwise(name, ".relu", 0, e);
        }
    }

    fn unit(&mut self, name: &str, cin: usize, cout: usize, k: usize, hw: (usize, usize), relu: bool) {
        let (p, m) = conv_cost(cin, cout, k, hw.0, hw.1);
        self.sink.row(|| format!("{name}.conv"), p, m);
        self.unit_tail(name, cout, hw, relu);
    }

    fn double_conv(&mut self, name: &str, cin: usize, cout: usize, hw: (usize, usize)) {
        self.unit(&format!("{name}.conv1"), cin, cout, 3, hw, true);
        self.unit(&format!("{name}.conv2"), cout, cout, 3, hw, true);
    }

    fn pfc(&mut self, name: &str, cin: usize, cout: usize, k: usize, hw: (usize, usize)) {
        self.unit(&format!("{name}.head"), cin, cout, 3, hw, true);
        let dw = format!("{name}.depthwise");
        let (p, m) = depthwise_cost(cout, k, hw.0, hw.1);
        self.sink.row(|| format!("{dw}.conv"), p, m);
        self.unit_tail(&dw, cout, hw, true);
        self.unit(&format!("{name}.pointwise"), cout, cout, 1, hw, true);
        self.elementwise(name, ".residual", 0, cout * hw.0 * hw.1);
    }

    fn csa(&mut self, name: &str, cin: usize, c: usize, hw: (usize, usize)) {
        let half = cin / 2;
        let e = c * hw.0 * hw.1;
        let hidden = attention_hidden(c);
        self.unit(&format!("{name}.group1.conv1"), half, c, 1, hw, true);
        self.unit(&format!("{name}.group1.conv2"), c, c, 3, hw, true);
        self.unit(&format!("{name}.group2.conv1"), half, c, 1, hw, true);
        self.unit(&format!("{name}.group2.conv2"), c, c, 3, hw, true);
        self.elementwise(name, ".group2.combine", 0, e);
        self.unit(&format!("{name}.group2.conv3"), c, c, 3, hw, true);
        self.elementwise(name, ".fuse", 0, e);
        self.elementwise(name, ".pool", 0, e);
        self.conv(&format!("{name}.attention.fc1"), c, hidden, 1, (1, 1));
        self.elementwise(name, ".attention.bn", 2 * hidden as u64, hidden);
        self.elementwise(name, ".attention.relu", 0, hidden);
        self.conv(&format!("{name}.attention.fc2"), hidden, 2 * c, 1, (1, 1));
        self.elementwise(name, ".attention.softmax", 0, 2 * c);
        self.elementwise(name, ".reweight", 0, 3 * e);
        if cin != c {
            self.unit(&format!("{name}.shortcut"), cin, c, 1, hw, false);
        }
        self.elementwise(name, ".residual", 0, e);
    }

    fn model(&mut self, config: &ModelConfig, h: usize, w: usize) {
        let widths = &config.stage_widths;
        let v = config.variant;
        let mut hw = (h, w);
        for (i, &c) in widths.iter().enumerate() {
            let name = block_name("encoder", i, v);
            if i == 0 {
                if v.uses_pfc() {
                    self.pfc(&name, INPUT_CHANNELS, c, config.pfc_kernel, hw);
                } else {
                    self.double_conv(&name, INPUT_CHANNELS, c, hw);
                }
                continue;
            }
            hw = (hw.0 / 2, hw.1 / 2);
            self.sink.row(|| format!("encoder.stage{i}.pool"), 0, (widths[i - 1] * hw.0 * hw.1) as u64);
            if v.uses_csa() {
                self.csa(&name, widths[i - 1], c, hw);
            } else {
                self.double_conv(&name, widths[i - 1], c, hw);
            }
        }
        for i in (0..widths.len().saturating_sub(1)).rev() {
            hw = (hw.0 * 2, hw.1 * 2);
            self.sink.row(|| format!("decoder.stage{i}.upsample"), 0, (widths[i + 1] * hw.0 * hw.1) as u64);
            let name = block_name("decoder", i, v);
            let cin = widths[i] + widths[i + 1];
            if v.uses_csa() {
                self.csa(&name, cin, widths[i], hw);
            } else {
                self.double_conv(&name, cin, widths[i], hw);
            }
        }
        self.conv("head", widths[0], config.num_classes, 1, hw);
    }
}

impl CostReport {
    /// Per-layer costs of `config` for one `3×h×w` image.
    pub fn new(config: &ModelConfig, h: usize, w: usize) -> Result<Self> {
        config.validate()?;
        config.check_input(INPUT_CHANNELS, h, w)?;
        let mut rows = Vec::new();
        Walker { sink: &mut rows }.model(config, h, w);
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs = rows.iter().map(|r| r.macs).sum();
        Ok(CostReport {
            variant: config.variant,
            stage_widths: config.stage_widths.clone(),
            pfc_kernel: config.pfc_kernel,
            input: [INPUT_CHANNELS, h, w],
            rows,
            total_params,
            total_macs,
        })
    }

    pub fn render(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let [c, h, w] = self.input;
        let widths: Vec<String> = self.stage_widths.iter().map(|w| w.to_string()).collect();
        writeln!(out, "variant {}  widths [{}]  pfc kernel {}  input {c}x{h}x{w}", self.variant, widths.join(","), self.pfc_kernel).unwrap();
        writeln!(out, "{:<name_w$}  {:>12}  {:>16}", "layer", "params", "MACs").unwrap();
        writeln!(out, "{}", "-".repeat(name_w + 32)).unwrap();
        for r in &self.rows {
            writeln!(out, "{:<name_w$}  {:>12}  {:>16}", r.name, r.params, r.macs).unwrap();
        }
        writeln!(out, "{}", "-".repeat(name_w + 32)).unwrap();
        writeln!(out, "{:<name_w$}  {:>12}  {:>16}", "total", self.total_params, self.total_macs).unwrap();
        writeln!(
            out,
            "params {:.2}M  GMacs {:.2}",
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9
        )
        .unwrap();
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Trainable scalars of the network described by `config`.
pub fn count_params(config: &ModelConfig) -> u64 {
    let mut t = Totals::default();
    let probe = config.divisor();
    Walker { sink: &mut t }.model(config, probe, probe);
    t.params
}

/// Multiply-accumulates of one forward pass on a `3×h×w` image.
pub fn count_flops(config: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    config.validate()?;
    config.check_input(INPUT_CHANNELS, h, w)?;
    Ok(totals(config, h, w).1)
}

fn totals(config: &ModelConfig, h: usize, w: usize) -> (u64, u64) {
    let mut t = Totals::default();
    Walker { sink: &mut t }.model(config, h, w);
    (t.params, t.macs)
}

/// Published (parameters, GMACs at 256×256) of each variant.
pub fn reference_cost(variant: Variant) -> (f64, f64) {
    match variant {
        Variant::Unet => (13.40e6, 31.11),
        Variant::UnetPfc => (13.37e6, 29.70),
        Variant::UnetCsa => (2.62e6, 8.33),
        Variant::Dcsau => (2.60e6, 6.91),
    }
}

/// Candidate stage widths considered by the calibration sweep.
pub fn calibration_grid() -> Vec<usize> {
    let mut g: Vec<usize> = (1..=32).map(|i| 16 * i).collect();
    g.extend([640, 768, 896, 1024]);
    g
}

pub const CALIBRATION_STAGES: usize = 5;
pub const CALIBRATION_SIDE: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantFit {
    pub variant: Variant,
    pub params: u64,
    pub gmacs: f64,
    pub params_error: f64,
    pub gmacs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub widths: Vec<usize>,
    /// Sum of squared relative errors over both variants and both columns.
    pub objective: f64,
    pub fits: Vec<VariantFit>,
}

/// Fit of one width schedule shared by `variants`.
pub fn evaluate_schedule(variants: &[Variant], widths: &[usize]) -> Candidate {
    let mut objective = 0.0;
    let mut fits = Vec::new();
    for &v in variants {
        let config = ModelConfig::new(v).with_widths(widths);
        let (params, macs) = totals(&config, CALIBRATION_SIDE, CALIBRATION_SIDE);
        let (tp, tg) = reference_cost(v);
        let gmacs = macs as f64 / 1e9;
        let pe = params as f64 / tp - 1.0;
        let ge = gmacs / tg - 1.0;
        objective += pe * pe + ge * ge;
        fits.push(VariantFit {
            variant: v,
            params,
            gmacs,
            params_error: pe,
            gmacs_error: ge,
        });
    }
    Candidate {
        widths: widths.to_vec(),
        objective,
        fits,
    }
}

/// Exhaustive search over non-decreasing five-stage schedules drawn from
/// [`calibration_grid`]. Returns the `keep` best candidates, best first;
/// ties keep the lexicographically smaller schedule.
pub fn calibrate(variants: &[Variant], keep: usize) -> Vec<Candidate> {
    let grid = calibration_grid();
    let mut best: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut idx = [0usize; CALIBRATION_STAGES];
    let mut widths = [0usize; CALIBRATION_STAGES];
    let configs: Vec<ModelConfig> = variants.iter().map(|&v| ModelConfig::new(v)).collect();
    let targets: Vec<(f64, f64)> = variants.iter().map(|&v| reference_cost(v)).collect();
    loop {
        for (w, &i) in widths.iter_mut().zip(&idx) {
            *w = grid[i];
        }
        let mut objective = 0.0;
        for (config, &(tp, tg)) in configs.iter().zip(&targets) {
            let config = ModelConfig {
                stage_widths: widths.to_vec(),
                ..config.clone()
            };
            let (p, m) = totals(&config, CALIBRATION_SIDE, CALIBRATION_SIDE);
            let pe = p as f64 / tp - 1.0;
            let ge = m as f64 / 1e9 / tg - 1.0;
            objective += pe * pe + ge * ge;
        }
        if best.len() < keep || objective < best[best.len() - 1].0 {
            let at = best.partition_point(|(o, _)| *o <= objective);
            best.insert(at, (objective, widths.to_vec()));
            best.truncate(keep);
        }
        // Advance to the next non-decreasing index tuple.
        let mut k = CALIBRATION_STAGES;
        loop {
            if k == 0 {
                return best.into_iter().map(|(_, w)| evaluate_schedule(variants, &w)).collect();
            }
            k -= 1;
            if idx[k] + 1 < grid.len() {
                idx[k] += 1;
                for j in k + 1..CALIBRATION_STAGES {
                    idx[j] = idx[k];
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_layer_costs() {
        assert_eq!(conv_cost(2, 4, 3, 1, 1).0, 76);
        assert_eq!(depthwise_cost(64, 7, 1, 1).0, 3200);
        assert_eq!(conv_cost(1, 1, 3, 4, 4).1, 144);
    }

    #[test]
    fn separable_pair_is_cheaper_than_dense() {
        for c in 2..200 {
            for k in [3, 5, 7, 9] {
                assert!(separable_params(c, k) < dense_params(c, k), "c={c} k={k}");
            }
        }
    }

    #[test]
    fn totals_match_rows() {
        let config = ModelConfig::new(Variant::Dcsau);
        let r = CostReport::new(&config, 64, 96).unwrap();
        assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
        assert_eq!((r.total_params, r.total_macs), totals(&config, 64, 96));
        assert_eq!(count_params(&config), r.total_params);
    }

    #[test]
    fn rejects_indivisible_input() {
        let err = count_flops(&ModelConfig::new(Variant::Unet), 250, 256).unwrap_err();
        assert!(err.to_string().contains("divisible by 16"), "{err}");
    }
}
