//! Encoder, class head, partial-logic mask generator and the defined/undefined
//! classifier, plus their parameter registry.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Affine map `x·W + b` with `W: in×out` and `b: 1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = glorot_bound(fan_in, fan_out);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor::new(fan_in, fan_out, data).expect("shape"),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.cols()
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLinear {
        let (weight, bias) = if trainable {
            (g.param(self.weight.clone()), g.param(self.bias.clone()))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        };
        BoundLinear { weight, bias }
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Which features the class head consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInput {
    /// Encoder output `Z`.
    Raw,
    /// Defined part `Z ⊙ Mask`.
    #[default]
    Masked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BundleShape {
    pub input_dim: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub encoder: Vec<LinearLayer>,
    pub head: LinearLayer,
    pub mask_gen: LinearLayer,
    pub partial_cls: LinearLayer,
}

impl ModelBundle {
    pub fn init(shape: BundleShape, seed: u64) -> Result<Self> {
        let BundleShape {
            input_dim,
            dim,
            num_classes,
            depth,
        } = shape;
        if dim < 2 || num_classes < 2 || depth < 1 || input_dim < 1 {
            return Err(Error::Config(format!(
                "invalid model sizes: input_dim={input_dim} dim={dim} K={num_classes} depth={depth} \
                 (need dim >= 2, K >= 2, depth >= 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = (0..depth)
            .map(|i| {
                let fan_in = if i == 0 { input_dim } else { dim };
                LinearLayer::glorot(fan_in, dim, &mut rng)
            })
            .collect();
        Ok(Self {
            encoder,
            head: LinearLayer::glorot(dim, num_classes, &mut rng),
            mask_gen: LinearLayer::glorot(dim, dim, &mut rng),
            partial_cls: LinearLayer::glorot(dim, 1, &mut rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.head.in_features()
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_features()
    }

    /// Parameters in registry order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &layer.weight));
            out.push((format!("encoder.{i}.bias"), &layer.bias));
        }
        for (name, layer) in self.named_blocks() {
            out.push((format!("{name}.weight"), &layer.weight));
            out.push((format!("{name}.bias"), &layer.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut layer.weight));
            out.push((format!("encoder.{i}.bias"), &mut layer.bias));
        }
        for (name, layer) in [
            ("head", &mut self.head),
            ("mask_gen", &mut self.mask_gen),
            ("partial_cls", &mut self.partial_cls),
        ] {
            out.push((format!("{name}.weight"), &mut layer.weight));
            out.push((format!("{name}.bias"), &mut layer.bias));
        }
        out
    }

    fn named_blocks(&self) -> [(&'static str, &LinearLayer); 3] {
        [
            ("head", &self.head),
            ("mask_gen", &self.mask_gen),
            ("partial_cls", &self.partial_cls),
        ]
    }

    /// Registers every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        self.bind_with(g, true)
    }

    /// Registers every parameter on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundModel {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let encoder = self.encoder.iter().map(|l| l.bind(g, trainable)).collect();
        BoundModel {
            encoder,
            head: self.head.bind(g, trainable),
            mask_gen: self.mask_gen.bind(g, trainable),
            partial_cls: self.partial_cls.bind(g, trainable),
        }
    }

    /// Redraws the partial-logic block (mask generator, and the
    /// defined/undefined classifier when `include_partial_cls`).
    pub fn reinit_mask(&mut self, seed: u64, include_partial_cls: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.dim();
        self.mask_gen = LinearLayer::glorot(dim, dim, &mut rng);
        if include_partial_cls {
            self.partial_cls = LinearLayer::glorot(dim, 1, &mut rng);
        }
    }

    /// Appends `extra` freshly initialised class columns to the head; existing
    /// columns are kept as they are.
    pub fn expand_head(&mut self, extra: usize, seed: u64) {
        if extra == 0 {
            return;
        }
        let dim = self.dim();
        let old_k = self.num_classes();
        let new_k = old_k + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = glorot_bound(dim, new_k);
        let mut weight = Tensor::zeros(dim, new_k);
        for r in 0..dim {
            for c in 0..new_k {
                let v = if c < old_k {
                    self.head.weight.get(r, c)
                } else {
                    rng.random_range(-bound..=bound)
                };
                weight.set(r, c, v);
            }
        }
        let mut bias = Tensor::zeros(1, new_k);
        bias.data_mut()[..old_k].copy_from_slice(self.head.bias.data());
        self.head = LinearLayer { weight, bias };
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, x: &Tensor, head_input: HeadInput) -> Result<Inference> {
        let mut g = Graph::new();
        let m = self.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let z = m.encode(&mut g, xv)?;
        let mask = m.mask_forward(&mut g, z)?;
        let defined = g.mul(z, mask)?;
        let hin = match head_input {
            HeadInput::Raw => z,
            HeadInput::Masked => defined,
        };
        let logits = m.head_forward(&mut g, hin)?;
        Ok(Inference {
            z: g.value(z).clone(),
            mask: g.value(mask).clone(),
            logits: g.value(logits).clone(),
        })
    }

    /// Per-dimension importance of the mask generator weights.
    pub fn snapshot_mask(&self, session: usize) -> MaskReport {
        MaskReport::from_weights(session, &self.mask_gen.weight)
    }

    /// Order-sensitive digest of a set of parameters (FNV-1a over the bit
    /// patterns); used to detect silent re-initialisation.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in self.params() {
            if !name.starts_with(prefix) {
                continue;
            }
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub z: Tensor,
    pub mask: Tensor,
    pub logits: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xw = g.matmul(x, self.weight)?;
        g.add_row(xw, self.bias)
    }
}

/// A [`ModelBundle`] registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: Vec<BoundLinear>,
    pub head: BoundLinear,
    pub mask_gen: BoundLinear,
    pub partial_cls: BoundLinear,
}

impl BoundModel {
    /// Vars in the same order as [`ModelBundle::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain([&self.head, &self.mask_gen, &self.partial_cls]) {
            out.push(l.weight);
            out.push(l.bias);
        }
        out
    }

    /// `g(x)`: ReLU between layers, none after the last.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.encoder.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// `sigmoid(Z·W + b)`, same shape as `z`.
    pub fn mask_forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let a = self.mask_gen.forward(g, z)?;
        Ok(g.sigmoid(a))
    }

    pub fn head_forward(&self, g: &mut Graph, zin: Var) -> Result<Var> {
        self.head.forward(g, zin)
    }

    /// Probability that each row carries defined meaning.
    pub fn partial_forward(&self, g: &mut Graph, zcat: Var) -> Result<Var> {
        let a = self.partial_cls.forward(g, zcat)?;
        Ok(g.sigmoid(a))
    }
}

/// Row statistics of the mask generator weights for one session.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskReport {
    pub session: usize,
    pub weights: Tensor,
    /// mean_j |W[i, j]| for each latent dimension i.
    pub row_importance: Vec<f64>,
    /// Min-max normalised importance; all zeros when every row is equal.
    pub normalized: Vec<f64>,
    pub binarized: Vec<u8>,
}

impl MaskReport {
    pub const THRESHOLD: f64 = 0.5;

    pub fn from_weights(session: usize, weights: &Tensor) -> Self {
        let row_importance: Vec<f64> = (0..weights.rows())
            .map(|i| {
                let row = weights.row(i);
                row.iter().map(|v| v.abs()).sum::<f64>() / row.len() as f64
            })
            .collect();
        let lo = row_importance.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row_importance
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let normalized: Vec<f64> = if hi > lo {
            row_importance.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; row_importance.len()]
        };
        let binarized = normalized
            .iter()
            .map(|&v| u8::from(v > Self::THRESHOLD))
            .collect();
        Self {
            session,
            weights: weights.clone(),
            row_importance,
            normalized,
            binarized,
        }
    }

    pub fn hamming(&self, other: &MaskReport) -> usize {
        self.binarized
            .iter()
            .zip(&other.binarized)
            .filter(|(a, b)| a != b)
            .count()
    }
}

pub const MASK_CSV_HEADER: [&str; 4] = ["session", "dim_index", "normalized_importance", "binarized"];

/// Writes `session,dim_index,normalized_importance,binarized` rows.
pub fn write_mask_csv<W: Write>(reports: &[MaskReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MASK_CSV_HEADER)?;
    for r in reports {
        for (i, (n, b)) in r.normalized.iter().zip(&r.binarized).enumerate() {
            w.write_record([
                r.session.to_string(),
                i.to_string(),
                format!("{n:.12}"),
                b.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_mask_csv`] back into per-session
/// `(normalized, binarized)` columns.
pub fn read_mask_csv<R: std::io::Read>(input: R) -> Result<Vec<(usize, Vec<f64>, Vec<u8>)>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out: Vec<(usize, Vec<f64>, Vec<u8>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse_err = |field: &str| Error::Contract(format!("malformed masks.csv field {field}"));
        let session: usize = rec[0].parse().map_err(|_| parse_err("session"))?;
        let norm: f64 = rec[2].parse().map_err(|_| parse_err("normalized_importance"))?;
        let bin: u8 = rec[3].parse().map_err(|_| parse_err("binarized"))?;
        match out.last_mut() {
            Some(last) if last.0 == session => {
                last.1.push(norm);
                last.2.push(bin);
            }
            _ => out.push((session, vec![norm], vec![bin])),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(dim: usize, k: usize) -> BundleShape {
        BundleShape {
            input_dim: 6,
            dim,
            num_classes: k,
            depth: 2,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelBundle::init(shape(4, 3), 7).unwrap();
        let b = ModelBundle::init(shape(4, 3), 7).unwrap();
        assert_eq!(a, b);
        let c = ModelBundle::init(shape(4, 3), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes() {
        let m = ModelBundle::init(shape(4, 3), 0).unwrap();
        assert_eq!(m.head.weight.shape(), (4, 3));
        assert_eq!(m.mask_gen.weight.shape(), (4, 4));
        assert_eq!(m.partial_cls.weight.shape(), (4, 1));
        assert_eq!(m.encoder[0].weight.shape(), (6, 4));
        assert_eq!(m.encoder[1].weight.shape(), (4, 4));
        assert!(m.params().iter().all(|(n, t)| !n.ends_with("bias") || t.sum() == 0.0));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(ModelBundle::init(shape(1, 3), 0), Err(Error::Config(_))));
        assert!(matches!(ModelBundle::init(shape(4, 1), 0), Err(Error::Config(_))));
        let mut s = shape(4, 3);
        s.depth = 0;
        assert!(matches!(ModelBundle::init(s, 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_weights_within_glorot_bound_and_centered() {
        // 100×100 weights, 10k samples
        let m = ModelBundle::init(
            BundleShape {
                input_dim: 100,
                dim: 100,
                num_classes: 2,
                depth: 1,
            },
            3,
        )
        .unwrap();
        let w = &m.encoder[0].weight;
        let bound = glorot_bound(100, 100);
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let mean = w.sum() / w.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn encode_identity_single_layer() {
        let mut m = ModelBundle::init(
            BundleShape {
                input_dim: 3,
                dim: 3,
                num_classes: 2,
                depth: 1,
            },
            0,
        )
        .unwrap();
        m.encoder[0] = LinearLayer {
            weight: Tensor::identity(3),
            bias: Tensor::zeros(1, 3),
        };
        let x = Tensor::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let inf = m.infer(&x, HeadInput::Raw).unwrap();
        assert_eq!(inf.z, x);
    }

    #[test]
    fn encode_shape_and_mismatch() {
        let m = ModelBundle::init(shape(4, 3), 0).unwrap();
        let inf = m.infer(&Tensor::full(5, 6, 0.1), HeadInput::Masked).unwrap();
        assert_eq!(inf.z.shape(), (5, 4));
        assert_eq!(inf.mask.shape(), (5, 4));
        assert_eq!(inf.logits.shape(), (5, 3));
        assert!(matches!(
            m.infer(&Tensor::zeros(5, 7), HeadInput::Raw),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_mask_gen_gives_half() {
        let mut m = ModelBundle::init(shape(4, 3), 0).unwrap();
        m.mask_gen = LinearLayer::zeros(4, 4);
        let inf = m.infer(&Tensor::full(2, 6, 0.3), HeadInput::Raw).unwrap();
        assert!(inf.mask.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut m = ModelBundle::init(shape(4, 3), 0).unwrap();
        m.head = LinearLayer::zeros(4, 3);
        let inf = m.infer(&Tensor::full(2, 6, 0.3), HeadInput::Raw).unwrap();
        let p = crate::autodiff::softmax(&inf.logits, crate::autodiff::Axis::Cols);
        assert!(p.data().iter().all(|&v| v == 1.0 / 3.0));
    }

    #[test]
    fn head_rows_are_independent() {
        let m = ModelBundle::init(shape(4, 4), 5).unwrap();
        let mut g = Graph::new();
        let b = m.bind_frozen(&mut g);
        let zin = Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0], [0.0, -1.0, 0.5, 2.0], [3.0, 3.0, 0.0, 1.0]])
            .unwrap();
        let swapped = zin.select_rows(&[1, 0, 2]);
        let a = g.constant(zin);
        let s = g.constant(swapped);
        let la = b.head_forward(&mut g, a).unwrap();
        let ls = b.head_forward(&mut g, s).unwrap();
        assert_eq!(g.value(la).shape(), (3, 4));
        assert_eq!(g.value(ls), &g.value(la).select_rows(&[1, 0, 2]));
    }

    #[test]
    fn zero_partial_cls_gives_half() {
        let mut m = ModelBundle::init(shape(4, 3), 0).unwrap();
        m.partial_cls = LinearLayer::zeros(4, 1);
        let mut g = Graph::new();
        let b = m.bind_frozen(&mut g);
        let z = g.constant(Tensor::full(6, 4, 1.3));
        let p = b.partial_forward(&mut g, z).unwrap();
        assert_eq!(g.value(p).shape(), (6, 1));
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reinit_mask_touches_only_partial_block() {
        let mut m = ModelBundle::init(shape(4, 3), 0).unwrap();
        let before = m.clone();
        m.reinit_mask(99, true);
        assert_eq!(m.encoder, before.encoder);
        assert_eq!(m.head, before.head);
        assert_ne!(m.mask_gen.weight, before.mask_gen.weight);
        assert_ne!(m.partial_cls.weight, before.partial_cls.weight);

        let mut again = before.clone();
        again.reinit_mask(99, true);
        assert_eq!(again, m);

        let mut keep_cls = before.clone();
        keep_cls.reinit_mask(99, false);
        assert_eq!(keep_cls.partial_cls, before.partial_cls);
    }

    #[test]
    fn expand_head_keeps_old_columns() {
        let mut m = ModelBundle::init(shape(4, 3), 0).unwrap();
        let old = m.head.clone();
        m.expand_head(2, 11);
        assert_eq!(m.num_classes(), 5);
        for r in 0..4 {
            for c in 0..3 {
                assert_eq!(m.head.weight.get(r, c), old.weight.get(r, c));
            }
        }
    }

    #[test]
    fn mask_report_two_rows() {
        let w = Tensor::from_rows(&[[0.0, 0.0], [1.0, -1.0]]).unwrap();
        let r = MaskReport::from_weights(0, &w);
        assert_eq!(r.normalized, vec![0.0, 1.0]);
        assert_eq!(r.binarized, vec![0, 1]);
    }

    #[test]
    fn mask_report_constant_weights_is_all_zero() {
        let r = MaskReport::from_weights(2, &Tensor::full(3, 3, 0.4));
        assert_eq!(r.normalized, vec![0.0; 3]);
        assert_eq!(r.binarized, vec![0; 3]);
    }

    #[test]
    fn mask_report_random_matches_recount() {
        let m = ModelBundle::init(shape(16, 3), 21).unwrap();
        let r = m.snapshot_mask(1);
        // recompute from scratch
        let w = &m.mask_gen.weight;
        let imp: Vec<f64> = (0..16)
            .map(|i| w.row(i).iter().map(|v| v.abs()).sum::<f64>() / 16.0)
            .collect();
        let lo = imp.iter().cloned().fold(f64::MAX, f64::min);
        let hi = imp.iter().cloned().fold(f64::MIN, f64::max);
        let expected = imp.iter().filter(|v| (*v - lo) / (hi - lo) > 0.5).count();
        assert_eq!(r.binarized.iter().map(|&b| b as usize).sum::<usize>(), expected);
    }

    #[test]
    fn mask_csv_roundtrip() {
        let m = ModelBundle::init(shape(4, 3), 2).unwrap();
        let reports = vec![m.snapshot_mask(0), m.snapshot_mask(1)];
        let mut buf = Vec::new();
        write_mask_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("session,dim_index,normalized_importance,binarized\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        let back = read_mask_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].2, reports[1].binarized);
    }
}
