//! The six component networks, their forward passes on a tape, and the
//! binary checkpoint format.
//!
//! Every network is a four-layer perceptron `in → d → ⌈d/2⌉ → d → out` with
//! ReLU hidden layers. With `d` features, `n_c` classes and noise width `d_z`:
//!
//! | network | input | output |
//! |---|---|---|
//! | encoder `E` | `[x̃, m]` (2d) | `h` (d, ReLU) |
//! | imputation generator `G_MI` | `h` | `x̄` (d, sigmoid) |
//! | element discriminator `D_MI` | `[x̂, y]` (d + n_c) | d + 1 scores (linear) |
//! | conditional generator `G_CG` | `[z, y_c]` (d_z + n_c) | `h_c` (d, ReLU) |
//! | hidden discriminator `D_CG` | `[h, y]` (d + n_c) | 1 score (sigmoid) |
//! | classifier `C` | `x̂` (d) | n_c probabilities (softmax) |

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Activation, BoundMlp, ForwardTrace, Layer, Mlp, NodeId, Tape, Tensor};
use crate::error::{HexaError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HXGN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Encoder,
    GenMi,
    DiscMi,
    GenCg,
    DiscCg,
    Classifier,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Encoder,
        Component::GenMi,
        Component::DiscMi,
        Component::GenCg,
        Component::DiscCg,
        Component::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "E",
            Component::GenMi => "G_MI",
            Component::DiscMi => "D_MI",
            Component::GenCg => "G_CG",
            Component::DiscCg => "D_CG",
            Component::Classifier => "C",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Weight initialisation scheme for [`init_params`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitScheme {
    #[default]
    He,
    Xavier,
}

impl std::str::FromStr for InitScheme {
    type Err = HexaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "he" => Ok(InitScheme::He),
            "xavier" => Ok(InitScheme::Xavier),
            other => Err(HexaError::config(format!("unknown init scheme '{other}' (he, xavier)"))),
        }
    }
}

/// Layer widths and output activation of one component for given sizes.
pub fn layout(component: Component, d: usize, n_classes: usize, d_z: usize) -> (Vec<usize>, Activation) {
    let (input, output, act) = match component {
        Component::Encoder => (2 * d, d, Activation::Relu),
        Component::GenMi => (d, d, Activation::Sigmoid),
        Component::DiscMi => (d + n_classes, d + 1, Activation::Linear),
        Component::GenCg => (d_z + n_classes, d, Activation::Relu),
        Component::DiscCg => (d + n_classes, 1, Activation::Sigmoid),
        Component::Classifier => (d, n_classes, Activation::Softmax),
    };
    (vec![input, d, d.div_ceil(2), d, output], act)
}

fn activations(out: Activation) -> [Activation; 4] {
    [Activation::Relu, Activation::Relu, Activation::Relu, out]
}

#[derive(Clone, Debug, PartialEq)]
pub struct HexaGanParams {
    pub d: usize,
    pub n_classes: usize,
    pub d_z: usize,
    nets: [Mlp; 6],
}

pub fn init_params(d: usize, n_classes: usize, d_z: usize, seed: u64, scheme: InitScheme) -> Result<HexaGanParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HexaGanParams::init(d, n_classes, d_z, scheme, &mut rng)
}

impl HexaGanParams {
    pub fn init<R: Rng + ?Sized>(d: usize, n_classes: usize, d_z: usize, scheme: InitScheme, rng: &mut R) -> Result<Self> {
        if d == 0 || n_classes < 2 || d_z == 0 {
            return Err(HexaError::config(format!(
                "need d >= 1, n_c >= 2, d_z >= 1; got d={d}, n_c={n_classes}, d_z={d_z}"
            )));
        }
        let mut build = |c: Component| {
            let (widths, out) = layout(c, d, n_classes, d_z);
            match scheme {
                InitScheme::He => Mlp::he_init(&widths, &activations(out), rng),
                InitScheme::Xavier => Mlp::xavier_init(&widths, &activations(out), rng),
            }
        };
        let nets = [
            build(Component::Encoder)?,
            build(Component::GenMi)?,
            build(Component::DiscMi)?,
            build(Component::GenCg)?,
            build(Component::DiscCg)?,
            build(Component::Classifier)?,
        ];
        Ok(Self { d, n_classes, d_z, nets })
    }

    /// All-zero weights and biases.
    pub fn zeros(d: usize, n_classes: usize, d_z: usize) -> Result<Self> {
        let nets = Component::ALL.map(|c| {
            let (widths, out) = layout(c, d, n_classes, d_z);
            Mlp::zeros(&widths, &activations(out))
        });
        let [a, b, c, e, f, g] = nets;
        Ok(Self {
            d,
            n_classes,
            d_z,
            nets: [a?, b?, c?, e?, f?, g?],
        })
    }

    /// Replaces one network after checking its widths.
    pub fn with_network(mut self, component: Component, net: Mlp) -> Result<Self> {
        let (widths, _) = layout(component, self.d, self.n_classes, self.d_z);
        if net.input_width() != widths[0] || net.output_width() != *widths.last().unwrap() {
            return Err(HexaError::dim(
                "with_network",
                format!("{} must map {} → {}, got {:?}", component.name(), widths[0], widths[4], net.widths()),
            ));
        }
        self.nets[component.index()] = net;
        Ok(self)
    }

    pub fn network(&self, c: Component) -> &Mlp {
        &self.nets[c.index()]
    }

    pub fn network_mut(&mut self, c: Component) -> &mut Mlp {
        &mut self.nets[c.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.nets.iter().all(Mlp::is_finite)
    }

    /// Puts every network on `tape`; only those in `trainable` get gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &[Component]) -> BoundNetworks {
        BoundNetworks {
            nets: Component::ALL.map(|c| self.network(c).bind(tape, trainable.contains(&c))),
            d: self.d,
            n_classes: self.n_classes,
        }
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [self.d, self.n_classes, self.d_z] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        for net in &self.nets {
            out.write_all(&(net.layers().len() as u32).to_le_bytes())?;
            for l in net.layers() {
                let (fan_in, fan_out) = l.weight.dims();
                out.write_all(&(fan_in as u64).to_le_bytes())?;
                out.write_all(&(fan_out as u64).to_le_bytes())?;
                out.write_all(&[l.activation.tag()])?;
                for v in l.weight.data().iter().chain(l.bias.data()) {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(HexaError::data("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(HexaError::data(format!("unsupported checkpoint version {version}")));
        }
        let d = read_u64(&mut input)? as usize;
        let n_classes = read_u64(&mut input)? as usize;
        let d_z = read_u64(&mut input)? as usize;
        let mut params = Self::zeros(d, n_classes, d_z)?;
        for c in Component::ALL {
            let n_layers = read_u32(&mut input)? as usize;
            if n_layers > 64 {
                return Err(HexaError::data(format!("{}: implausible layer count {n_layers}", c.name())));
            }
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let fan_in = read_u64(&mut input)? as usize;
                let fan_out = read_u64(&mut input)? as usize;
                let mut tag = [0u8; 1];
                input.read_exact(&mut tag)?;
                let activation = Activation::from_tag(tag[0])
                    .ok_or_else(|| HexaError::data(format!("{}: unknown activation tag {}", c.name(), tag[0])))?;
                let weight = Tensor::from_matrix(fan_in, fan_out, read_f64s(&mut input, fan_in * fan_out)?)?;
                let bias = Tensor::from_matrix(1, fan_out, read_f64s(&mut input, fan_out)?)?;
                layers.push(Layer { weight, bias, activation });
            }
            params = params.with_network(c, Mlp::new(layers)?)?;
        }
        Ok(params)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn check_binary_mask(m: &Tensor) -> Result<()> {
    if let Some(v) = m.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(HexaError::contract(format!("mask entries must be 0 or 1, found {v}")));
    }
    Ok(())
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(HexaError::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x̃ = m⊙x + (1−m)⊙z`.
pub fn fill_noise(x: &Tensor, m: &Tensor, z: &Tensor) -> Result<Tensor> {
    check_same("fill_noise", x, m)?;
    check_same("fill_noise", x, z)?;
    check_binary_mask(m)?;
    let data = x
        .data()
        .iter()
        .zip(m.data())
        .zip(z.data())
        .map(|((&x, &m), &z)| if m == 1.0 { x } else { z })
        .collect();
    Tensor::from_matrix(x.rows(), x.cols(), data)
}

/// `x̂ = m⊙x + (1−m)⊙x̄`, observed entries copied bit for bit.
pub fn compose_imputed(x: &Tensor, m: &Tensor, xbar: &Tensor) -> Result<Tensor> {
    fill_noise(x, m, xbar)
}

/// Draws one class per row from `probs` and returns the one-hot matrix.
pub fn sample_pseudo_label<R: Rng + ?Sized>(probs: &Tensor, rng: &mut R) -> Result<Tensor> {
    let (b, n_c) = probs.dims();
    let mut out = Tensor::zeros(b, n_c);
    for j in 0..b {
        let row = probs.row(j);
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(HexaError::contract(format!("row {j} is not a distribution (sum {total})")));
        }
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n_c - 1;
        for (k, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = k;
                break;
            }
        }
        // never pick a zero-probability tail class through rounding
        while row[pick] == 0.0 && pick > 0 {
            pick -= 1;
        }
        out.set(j, pick, 1.0);
    }
    Ok(out)
}

/// The six networks bound to one tape.
#[derive(Clone, Debug)]
pub struct BoundNetworks {
    nets: [BoundMlp; 6],
    d: usize,
    n_classes: usize,
}

impl BoundNetworks {
    pub fn net(&self, c: Component) -> &BoundMlp {
        &self.nets[c.index()]
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `h = E([x̃, m])`.
    pub fn encode(&self, tape: &mut Tape, x_tilde: NodeId, m: NodeId) -> Result<NodeId> {
        let input = tape.concat_cols(x_tilde, m)?;
        Ok(self.net(Component::Encoder).forward(tape, input)?.output())
    }

    /// `x̄ = G_MI(h)`.
    pub fn generate_imputation(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        Ok(self.net(Component::GenMi).forward(tape, h)?.output())
    }

    /// `x̂ = m⊙x + (1−m)⊙x̄` on the tape; `x` and `m` are data.
    pub fn compose_imputed(&self, tape: &mut Tape, x: &Tensor, m: &Tensor, xbar: NodeId) -> Result<NodeId> {
        check_same("compose_imputed", x, m)?;
        let observed = tape.constant(x.zip_map(m, |x, m| x * m)?);
        let missing = tape.constant(m.map(|m| 1.0 - m));
        let filled = tape.hadamard(missing, xbar)?;
        tape.add(observed, filled)
    }

    /// Forward pass of `D_MI` on `[x̂, y]`, keeping the trace for penalties.
    pub fn discriminate_elements_traced(&self, tape: &mut Tape, x_hat: NodeId, y: NodeId) -> Result<ForwardTrace> {
        let input = tape.concat_cols(x_hat, y)?;
        self.net(Component::DiscMi).forward(tape, input)
    }

    pub fn discriminate_elements(&self, tape: &mut Tape, x_hat: NodeId, y: NodeId) -> Result<NodeId> {
        Ok(self.discriminate_elements_traced(tape, x_hat, y)?.output())
    }

    /// `h_c = G_CG([z, y_c])`.
    pub fn generate_hidden_conditional(&self, tape: &mut Tape, z: NodeId, y_c: NodeId) -> Result<NodeId> {
        let input = tape.concat_cols(z, y_c)?;
        Ok(self.net(Component::GenCg).forward(tape, input)?.output())
    }

    pub fn discriminate_hidden_traced(&self, tape: &mut Tape, h: NodeId, y: NodeId) -> Result<ForwardTrace> {
        let input = tape.concat_cols(h, y)?;
        self.net(Component::DiscCg).forward(tape, input)
    }

    pub fn discriminate_hidden(&self, tape: &mut Tape, h: NodeId, y: NodeId) -> Result<NodeId> {
        Ok(self.discriminate_hidden_traced(tape, h, y)?.output())
    }

    pub fn classify(&self, tape: &mut Tape, x_hat: NodeId) -> Result<NodeId> {
        Ok(self.net(Component::Classifier).forward(tape, x_hat)?.output())
    }
}

/// Tape-free forward passes for inference.
impl HexaGanParams {
    /// Imputed matrix `x̂` for `x` with mask `m`, filling missing inputs with `z`.
    pub fn impute(&self, x: &Tensor, m: &Tensor, z: &Tensor) -> Result<Tensor> {
        let (x_hat, _) = self.impute_with_hidden(x, m, z)?;
        Ok(x_hat)
    }

    /// `(x̂, h)`.
    pub fn impute_with_hidden(&self, x: &Tensor, m: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let x_tilde = fill_noise(x, m, z)?;
        let mut tape = Tape::new();
        let nets = self.bind(&mut tape, &[]);
        let xt = tape.constant(x_tilde);
        let mi = tape.constant(m.clone());
        let h = nets.encode(&mut tape, xt, mi)?;
        let xbar = nets.generate_imputation(&mut tape, h)?;
        let x_hat = compose_imputed(x, m, tape.value(xbar))?;
        Ok((x_hat, tape.value(h).clone()))
    }

    pub fn predict_proba(&self, x_hat: &Tensor) -> Result<Tensor> {
        self.network(Component::Classifier).infer(x_hat)
    }

    pub fn predict(&self, x_hat: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x_hat)?.argmax_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_follow_feature_count() {
        let p = init_params(30, 2, 30, 0, InitScheme::He).unwrap();
        assert_eq!(p.network(Component::DiscMi).output_width(), 31);
        assert_eq!(p.network(Component::Encoder).input_width(), 60);
        assert_eq!(p.network(Component::Encoder).widths(), vec![60, 30, 15, 30, 30]);
        let odd = init_params(5, 3, 2, 0, InitScheme::He).unwrap();
        assert_eq!(odd.network(Component::GenCg).widths(), vec![5, 5, 3, 5, 5]);
        let one = init_params(1, 2, 1, 0, InitScheme::Xavier).unwrap();
        assert_eq!(one.network(Component::GenMi).widths(), vec![1, 1, 1, 1, 1]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_params(7, 2, 7, 42, InitScheme::He).unwrap();
        let b = init_params(7, 2, 7, 42, InitScheme::He).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(7, 2, 7, 43, InitScheme::He).unwrap());
    }

    #[test]
    fn fill_noise_cases() {
        let x = Tensor::row_vector(vec![0.5, 0.2]);
        let z = Tensor::row_vector(vec![0.9, 0.7]);
        let m = Tensor::row_vector(vec![1.0, 0.0]);
        assert_eq!(fill_noise(&x, &m, &z).unwrap().data(), &[0.5, 0.7]);
        assert_eq!(fill_noise(&x, &Tensor::ones(1, 2), &z).unwrap().data(), x.data());
        assert_eq!(fill_noise(&x, &Tensor::zeros(1, 2), &z).unwrap().data(), z.data());
        let bad = Tensor::row_vector(vec![0.5, 1.0]);
        assert!(matches!(fill_noise(&x, &bad, &z), Err(HexaError::Contract(_))));
    }

    #[test]
    fn compose_cases() {
        let x = Tensor::row_vector(vec![0.5, 0.2]);
        let m = Tensor::row_vector(vec![1.0, 0.0]);
        let xbar = Tensor::row_vector(vec![0.4, 0.8]);
        assert_eq!(compose_imputed(&x, &m, &xbar).unwrap().data(), &[0.5, 0.8]);
        let mut tape = Tape::new();
        let p = init_params(2, 2, 2, 0, InitScheme::He).unwrap();
        let nets = p.bind(&mut tape, &[]);
        let xb = tape.constant(xbar);
        let node = nets.compose_imputed(&mut tape, &x, &m, xb).unwrap();
        assert_eq!(tape.value(node).data(), &[0.5, 0.8]);
    }

    #[test]
    fn zero_networks() {
        let p = HexaGanParams::zeros(3, 2, 4).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]);
        let m = Tensor::ones(2, 3);
        let (x_hat, h) = p.impute_with_hidden(&x, &m, &Tensor::zeros(2, 3)).unwrap();
        assert_eq!(x_hat, x);
        assert!(h.data().iter().all(|&v| v == 0.0));
        let missing = Tensor::zeros(2, 3);
        assert!(p.impute(&x, &missing, &x).unwrap().data().iter().all(|&v| v == 0.5));
        assert_eq!(p.predict_proba(&x).unwrap().data(), &[0.5; 4]);

        let mut tape = Tape::new();
        let nets = p.bind(&mut tape, &[]);
        let xi = tape.constant(x.clone());
        let yi = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let s = nets.discriminate_elements(&mut tape, xi, yi).unwrap();
        assert_eq!(tape.value(s).dims(), (2, 4));
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        let z = tape.constant(Tensor::ones(2, 4));
        let hc = nets.generate_hidden_conditional(&mut tape, z, yi).unwrap();
        assert!(tape.value(hc).data().iter().all(|&v| v == 0.0));
        let score = nets.discriminate_hidden(&mut tape, hc, yi).unwrap();
        assert_eq!(tape.value(score).data(), &[0.5, 0.5]);
    }

    #[test]
    fn width_mismatch_is_reported() {
        let p = init_params(3, 2, 3, 0, InitScheme::He).unwrap();
        assert!(p.predict_proba(&Tensor::zeros(1, 4)).is_err());
        let mut tape = Tape::new();
        let nets = p.bind(&mut tape, &[]);
        let h = tape.constant(Tensor::zeros(1, 2));
        assert!(matches!(
            nets.generate_imputation(&mut tape, h),
            Err(HexaError::Dimension { .. })
        ));
    }

    #[test]
    fn pseudo_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sure = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        for _ in 0..50 {
            assert_eq!(sample_pseudo_label(&sure, &mut rng).unwrap(), sure);
        }
        let half = Tensor::filled(10_000, 2, 0.5);
        let draws = sample_pseudo_label(&half, &mut rng).unwrap();
        let zeros = (0..10_000).filter(|&j| draws.get(j, 0) == 1.0).count() as f64 / 1e4;
        assert!((0.48..=0.52).contains(&zeros), "{zeros}");
        assert!((0..10_000).all(|j| draws.row(j).iter().sum::<f64>() == 1.0));
        assert!(sample_pseudo_label(&Tensor::row_vector(vec![0.5, 0.4]), &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = init_params(4, 3, 5, 8, InitScheme::He).unwrap();
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        assert_eq!(&buf[..4], CHECKPOINT_MAGIC);
        let q = HexaGanParams::load(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut again = Vec::new();
        q.save(&mut again).unwrap();
        assert_eq!(buf, again);
        buf[0] = b'X';
        assert!(HexaGanParams::load(buf.as_slice()).is_err());
    }
}
