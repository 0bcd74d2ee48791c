//! Sensing and location encoders and the attention block that fuses them
//! into the conditioning vector `R_MMT`.

use rand::Rng;

use crate::carray::CArray;
use crate::channel::{bearing, distance, Point};
use crate::error::{Error, Result};
use crate::numerics::{BatchNorm, Conv2d, Linear, Mode, MultiHeadAttention, ParamStore, Tape, Var};

/// Coordinates and ranges are divided by this before entering the network.
pub const COORDINATE_SCALE_M: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SensingEncoderConfig {
    pub conv_filters: Vec<usize>,
    pub kernel_size: usize,
    pub embedding_dim: usize,
}

impl Default for SensingEncoderConfig {
    fn default() -> Self {
        SensingEncoderConfig {
            conv_filters: vec![16, 32, 64],
            kernel_size: 3,
            embedding_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocationEncoderConfig {
    pub hidden: usize,
    pub embedding_dim: usize,
}

impl Default for LocationEncoderConfig {
    fn default() -> Self {
        LocationEncoderConfig {
            hidden: 64,
            embedding_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub layers: usize,
    pub heads: usize,
    pub feedforward_hidden: usize,
    pub output_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            layers: 1,
            heads: 8,
            feedforward_hidden: 128,
            output_dim: 128,
        }
    }
}

/// Shared conv trunk applied to each receiving AP's `(re, im)` planes,
/// followed by a shared projection to one token per AP.
#[derive(Clone, Debug)]
pub struct SensingEncoder {
    pub config: SensingEncoderConfig,
    pub antennas: usize,
    pub num_receive_aps: usize,
    stages: Vec<(Conv2d, BatchNorm)>,
    head: Linear,
}

impl SensingEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        config: &SensingEncoderConfig,
        num_receive_aps: usize,
        antennas: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.conv_filters.is_empty() || config.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(
                "sensing encoder needs conv stages with an odd kernel size".into(),
            ));
        }
        let mut stages = Vec::new();
        let mut c_in = 2;
        for (i, &c_out) in config.conv_filters.iter().enumerate() {
            let conv = Conv2d::new(
                store,
                &format!("{path}.conv{i}"),
                c_in,
                c_out,
                config.kernel_size,
                1,
                config.kernel_size / 2,
                rng,
            );
            let bn = BatchNorm::new(store, &format!("{path}.bn{i}"), c_out);
            stages.push((conv, bn));
            c_in = c_out;
        }
        let head = Linear::new(
            store,
            &format!("{path}.head"),
            c_in * antennas * antennas,
            config.embedding_dim,
            rng,
        );
        Ok(SensingEncoder {
            config: config.clone(),
            antennas,
            num_receive_aps,
            stages,
            head,
        })
    }

    /// `input` is `[B·L_r, 2, M, M]`; returns tokens `[B·L_r, embedding_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var, mode: Mode) -> Result<Var> {
        let m = self.antennas;
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != 2 || shape[2] != m || shape[3] != m {
            return Err(Error::Config(format!(
                "sensing encoder expects [n, 2, {m}, {m}], got {shape:?}"
            )));
        }
        let mut x = input;
        for (conv, bn) in &self.stages {
            x = conv.forward(tape, store, x)?;
            x = bn.forward(tape, store, x, mode)?;
            x = tape.relu(x);
        }
        let n = shape[0];
        let flat = tape.reshape(x, &[n, self.head.in_dim])?;
        self.head.forward(tape, store, flat)
    }
}

/// Real-valued encoder input `[L_r, 2, M, M]` from a complex `[L_r, M, M]`
/// estimate, each entry divided by `scale`.
pub fn sensing_planes(h_sens_est: &CArray, scale: f64) -> Result<Vec<f64>> {
    let [l_r, m, m2] = *h_sens_est.shape() else {
        return Err(Error::Config(format!(
            "sensing estimate must be [L_r, M, M], got {:?}",
            h_sens_est.shape()
        )));
    };
    if m != m2 {
        return Err(Error::Config(format!("sensing estimate is not square: {m}x{m2}")));
    }
    if !(scale > 0.0) {
        return Err(Error::Input(format!("sensing scale must be positive, got {scale}")));
    }
    let mut out = vec![0.0; l_r * 2 * m * m];
    for r in 0..l_r {
        for (i, z) in h_sens_est.slice(&[r]).iter().enumerate() {
            out[(r * 2) * m * m + i] = z.re / scale;
            out[(r * 2 + 1) * m * m + i] = z.im / scale;
        }
    }
    Ok(out)
}

/// Root-mean-square of all real and imaginary entries; 1 for an all-zero array.
pub fn rms_scale(a: &CArray) -> f64 {
    let s = (a.norm_sqr() / (2 * a.len()).max(1) as f64).sqrt();
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// `(x, y, r, θ)` of a UE relative to `reference`, lengths in units of
/// [`COORDINATE_SCALE_M`]; `θ = 0` when the UE sits on the reference.
pub fn location_features(ue: Point, reference: Point) -> [f64; 4] {
    let r = distance(ue, reference);
    let theta = if r == 0.0 { 0.0 } else { bearing(reference, ue) };
    [
        ue.0 / COORDINATE_SCALE_M,
        ue.1 / COORDINATE_SCALE_M,
        r / COORDINATE_SCALE_M,
        theta,
    ]
}

/// One hidden layer with ReLU, then a linear output layer.
#[derive(Clone, Debug)]
pub struct LocationEncoder {
    pub config: LocationEncoderConfig,
    hidden: Linear,
    output: Linear,
}

impl LocationEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        config: &LocationEncoderConfig,
        rng: &mut R,
    ) -> Self {
        LocationEncoder {
            config: config.clone(),
            hidden: Linear::new(store, &format!("{path}.hidden"), 4, config.hidden, rng),
            output: Linear::new(
                store,
                &format!("{path}.output"),
                config.hidden,
                config.embedding_dim,
                rng,
            ),
        }
    }

    /// `features` is `[B, 4]`; returns `[B, embedding_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, features)?;
        let h = tape.relu(h);
        self.output.forward(tape, store, h)
    }
}

/// Self-attention over sensing tokens, cross-attention from the location
/// token, then a two-layer feedforward to `output_dim`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub model_dim: usize,
    self_attention: MultiHeadAttention,
    cross_attention: MultiHeadAttention,
    ff_hidden: Linear,
    ff_output: Linear,
}

/// Intermediate values of a fusion pass.
pub struct FusionOutput {
    pub output: Var,
    pub self_scores: Var,
    pub cross_scores: Var,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        config: &FusionConfig,
        model_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.layers != 1 {
            return Err(Error::Config(format!(
                "fusion supports exactly one layer, got {}",
                config.layers
            )));
        }
        Ok(Fusion {
            config: config.clone(),
            model_dim,
            self_attention: MultiHeadAttention::new(
                store,
                &format!("{path}.self_attention"),
                model_dim,
                config.heads,
                rng,
            )?,
            cross_attention: MultiHeadAttention::new(
                store,
                &format!("{path}.cross_attention"),
                model_dim,
                config.heads,
                rng,
            )?,
            ff_hidden: Linear::new(
                store,
                &format!("{path}.ff_hidden"),
                model_dim,
                config.feedforward_hidden,
                rng,
            ),
            ff_output: Linear::new(
                store,
                &format!("{path}.ff_output"),
                config.feedforward_hidden,
                config.output_dim,
                rng,
            ),
        })
    }

    /// `tokens` is `[B·n_tokens, d]`, `location` is `[B, d]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        location: Var,
        batch: usize,
    ) -> Result<FusionOutput> {
        let d = self.model_dim;
        for v in [tokens, location] {
            let s = tape.value(v).shape();
            if s.len() != 2 || s[1] != d {
                return Err(Error::Config(format!(
                    "fusion expects {d}-dim rows, got {s:?}"
                )));
            }
        }
        let sa = self.self_attention.forward(tape, store, tokens, tokens, batch)?;
        let tokens = tape.add(tokens, sa.output)?;
        let ca = self.cross_attention.forward(tape, store, location, tokens, batch)?;
        let fused = tape.add(location, ca.output)?;
        let h = self.ff_hidden.forward(tape, store, fused)?;
        let h = tape.relu(h);
        let output = self.ff_output.forward(tape, store, h)?;
        Ok(FusionOutput {
            output,
            self_scores: sa.scores,
            cross_scores: ca.scores,
        })
    }
}

/// Per-item conditioning inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// Normalized `[L_r, 2, M, M]` planes.
    pub sensing: Vec<f64>,
    pub location: [f64; 4],
}

/// The complete encoder stack producing `R_MMT`.
#[derive(Clone, Debug)]
pub struct ConditionEncoders {
    pub sensing: SensingEncoder,
    pub location: LocationEncoder,
    pub fusion: Fusion,
}

/// Output of [`ConditionEncoders::forward`].
pub struct EncoderOutput {
    /// `[B·L_r, d]`.
    pub tokens: Var,
    /// Mean token per item, `[B, d]`.
    pub pooled_sensing: Var,
    pub location: Var,
    pub fusion: FusionOutput,
}

impl ConditionEncoders {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        sensing: &SensingEncoderConfig,
        location: &LocationEncoderConfig,
        fusion: &FusionConfig,
        num_receive_aps: usize,
        antennas: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if sensing.embedding_dim != location.embedding_dim {
            return Err(Error::Config(format!(
                "sensing ({}) and location ({}) embeddings must share the model dim",
                sensing.embedding_dim, location.embedding_dim
            )));
        }
        Ok(ConditionEncoders {
            sensing: SensingEncoder::new(
                store,
                &format!("{path}.sensing"),
                sensing,
                num_receive_aps,
                antennas,
                rng,
            )?,
            location: LocationEncoder::new(store, &format!("{path}.location"), location, rng),
            fusion: Fusion::new(
                store,
                &format!("{path}.fusion"),
                fusion,
                sensing.embedding_dim,
                rng,
            )?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.fusion.config.output_dim
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        items: &[&Conditioning],
        mode: Mode,
    ) -> Result<EncoderOutput> {
        let (l_r, m) = (self.sensing.num_receive_aps, self.sensing.antennas);
        let per_item = l_r * 2 * m * m;
        let mut planes = Vec::with_capacity(items.len() * per_item);
        let mut feats = Vec::with_capacity(items.len() * 4);
        for c in items {
            if c.sensing.len() != per_item {
                return Err(Error::Config(format!(
                    "conditioning has {} sensing values, model expects L_r = {l_r}, M = {m} ({per_item})",
                    c.sensing.len()
                )));
            }
            planes.extend_from_slice(&c.sensing);
            feats.extend_from_slice(&c.location);
        }
        let b = items.len();
        let planes = tape.constant(crate::numerics::Tensor::new(&[b * l_r, 2, m, m], planes)?);
        let feats = tape.constant(crate::numerics::Tensor::new(&[b, 4], feats)?);
        self.forward_vars(tape, store, planes, feats, b, mode)
    }

    /// Same as [`Self::forward`] on tape variables (used for gradient checks).
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        planes: Var,
        features: Var,
        batch: usize,
        mode: Mode,
    ) -> Result<EncoderOutput> {
        let tokens = self.sensing.forward(tape, store, planes, mode)?;
        let pooled_sensing = tape.mean_groups(tokens, self.sensing.num_receive_aps)?;
        let location = self.location.forward(tape, store, features)?;
        let fusion = self.fusion.forward(tape, store, tokens, location, batch)?;
        Ok(EncoderOutput {
            tokens,
            pooled_sensing,
            location,
            fusion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions, Tensor};
    use crate::rng::{complex_normal, stream_rng};

    fn build(l_r: usize, m: usize, seed: u64) -> (ParamStore, ConditionEncoders) {
        let mut store = ParamStore::new();
        let enc = ConditionEncoders::new(
            &mut store,
            "enc",
            &SensingEncoderConfig::default(),
            &LocationEncoderConfig::default(),
            &FusionConfig::default(),
            l_r,
            m,
            &mut stream_rng(seed, 0),
        )
        .unwrap();
        (store, enc)
    }

    fn random_conditioning(l_r: usize, m: usize, seed: u64) -> Conditioning {
        let mut rng = stream_rng(seed, 1);
        let h = CArray::from_vec(
            &[l_r, m, m],
            (0..l_r * m * m).map(|_| complex_normal(&mut rng, 1.0)).collect(),
        )
        .unwrap();
        let ue = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        Conditioning {
            sensing: sensing_planes(&h, 1.0).unwrap(),
            location: location_features(ue, (0.0, 50.0)),
        }
    }

    fn run(store: &ParamStore, enc: &ConditionEncoders, items: &[&Conditioning]) -> (Tape, EncoderOutput) {
        let mut tape = Tape::new();
        let out = enc.forward(&mut tape, store, items, Mode::Eval).unwrap();
        (tape, out)
    }

    #[test]
    fn location_feature_cases() {
        assert_eq!(location_features((0.0, 50.0), (0.0, 50.0)), [0.0, 0.5, 0.0, 0.0]);
        let f = location_features((100.0, 50.0), (0.0, 50.0));
        assert_eq!(f, [1.0, 0.5, 1.0, 0.0]);
        let g = location_features((30.0, 90.0), (0.0, 50.0));
        assert!((g[2] - 0.5).abs() < 1e-15);
        assert!((g[3] - (40f64).atan2(30.0)).abs() < 1e-15);
    }

    #[test]
    fn output_dimensions() {
        for m in [4, 8] {
            let (store, enc) = build(2, m, 1);
            let c = random_conditioning(2, m, 2);
            let (tape, out) = run(&store, &enc, &[&c, &c]);
            assert_eq!(tape.value(out.tokens).shape(), &[4, 16]);
            assert_eq!(tape.value(out.pooled_sensing).shape(), &[2, 16]);
            assert_eq!(tape.value(out.location).shape(), &[2, 16]);
            assert_eq!(tape.value(out.fusion.output).shape(), &[2, 128]);
        }
    }

    #[test]
    fn zero_input_gives_reproducible_constant() {
        let (store, enc) = build(2, 4, 3);
        let zero = Conditioning {
            sensing: vec![0.0; 2 * 2 * 16],
            location: [0.0; 4],
        };
        let (t1, o1) = run(&store, &enc, &[&zero]);
        let (t2, o2) = run(&store, &enc, &[&zero]);
        assert_eq!(t1.value(o1.fusion.output), t2.value(o2.fusion.output));
        // both AP tokens see identical zero planes
        let tok = t1.value(o1.tokens);
        assert_eq!(tok.row(0), tok.row(1));
    }

    #[test]
    fn permuting_receive_aps_permutes_tokens() {
        let (store, enc) = build(2, 4, 4);
        let c = random_conditioning(2, 4, 5);
        let half = c.sensing.len() / 2;
        let mut swapped = c.clone();
        swapped.sensing = [&c.sensing[half..], &c.sensing[..half]].concat();
        let (t1, o1) = run(&store, &enc, &[&c]);
        let (t2, o2) = run(&store, &enc, &[&swapped]);
        let (a, b) = (t1.value(o1.tokens), t2.value(o2.tokens));
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
        let (fa, fb) = (t1.value(o1.fusion.output), t2.value(o2.fusion.output));
        for (x, y) in fa.data().iter().zip(fb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_weights_are_stochastic() {
        let (store, enc) = build(2, 4, 6);
        let items: Vec<Conditioning> = (0..5).map(|s| random_conditioning(2, 4, 10 + s)).collect();
        let refs: Vec<&Conditioning> = items.iter().collect();
        let (tape, out) = run(&store, &enc, &refs);
        let w = tape.attention_weights(out.fusion.cross_scores).unwrap();
        assert_eq!(w.len(), 5 * 8 * 2);
        for row in w.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_token_cross_attention_returns_projected_token() {
        let (store, enc) = build(1, 4, 7);
        let c = random_conditioning(1, 4, 8);
        let (tape, out) = run(&store, &enc, &[&c]);
        let w = tape.attention_weights(out.fusion.cross_scores).unwrap();
        assert!(w.iter().all(|&x| x == 1.0));
        // value projection of the self-attended token
        let ca = &enc.fusion.cross_attention;
        let mut t2 = Tape::new();
        let tokens = t2.constant(tape.value(out.tokens).clone());
        let sa = enc.fusion.self_attention.forward(&mut t2, &store, tokens, tokens, 1).unwrap();
        let attended = t2.add(tokens, sa.output).unwrap();
        let v = ca.value.forward(&mut t2, &store, attended).unwrap();
        assert_eq!(t2.value(v).data(), tape.value(out.fusion.cross_scores).data());
    }

    #[test]
    fn embeddings_stay_bounded() {
        let (store, enc) = build(2, 4, 9);
        let items: Vec<Conditioning> = (0..1000)
            .map(|s| {
                let mut c = random_conditioning(2, 4, 100 + s);
                let scale = c.sensing.iter().map(|x| x * x).sum::<f64>().sqrt()
                    / (c.sensing.len() as f64).sqrt();
                c.sensing.iter_mut().for_each(|x| *x /= scale);
                c
            })
            .collect();
        for chunk in items.chunks(100) {
            let refs: Vec<&Conditioning> = chunk.iter().collect();
            let (tape, out) = run(&store, &enc, &refs);
            let o = tape.value(out.fusion.output);
            assert!(o.is_finite());
            for row in o.rows() {
                assert!(row.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e6);
            }
        }
    }

    #[test]
    fn gradients_flow_end_to_end() {
        for seed in 0..3 {
            let (store, enc) = build(2, 4, 20 + seed);
            let c = [random_conditioning(2, 4, 30 + seed), random_conditioning(2, 4, 40 + seed)];
            let planes = Tensor::new(&[4, 2, 4, 4], [c[0].sensing.clone(), c[1].sensing.clone()].concat())
                .unwrap();
            let feats = Tensor::new(&[2, 4], [c[0].location, c[1].location].concat()).unwrap();
            let report = grad_check(
                |tape, store, v| {
                    Ok(enc
                        .forward_vars(tape, store, v[0], v[1], 2, Mode::Train)?
                        .fusion
                        .output)
                },
                &store,
                &[planes, feats],
                &GradCheckOptions {
                    max_coords_per_tensor: Some(6),
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {:?}", report.failures().next());
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let (store, enc) = build(2, 4, 11);
        let c = random_conditioning(2, 8, 12);
        let mut tape = Tape::new();
        assert!(matches!(
            enc.forward(&mut tape, &store, &[&c], Mode::Eval),
            Err(Error::Config(_))
        ));
        let bad = CArray::zeros(&[2, 4, 3]);
        assert!(sensing_planes(&bad, 1.0).is_err());
    }
}
