//! WNet: a two-encoder, one-decoder convolutional network over the `V` and
//! `K` tables producing the fused table `U`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{NnError, ParamId, ParameterStore, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Separate encoders for `V` and `K`, fused at every skip and the bottleneck.
    #[default]
    Dual,
    /// `V` and `K` concatenated along channels into one encoder.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WNetConfig {
    /// When false the `V` table is passed through a 1x1 projection only.
    pub enabled: bool,
    pub depth: usize,
    pub base_channels: usize,
    /// Channel count `u` of the output table.
    pub out_channels: usize,
    pub use_attention_input: bool,
    pub fusion: Fusion,
}

impl Default for WNetConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            depth: 2,
            base_channels: 32,
            out_channels: 64,
            use_attention_input: true,
            fusion: Fusion::Dual,
        }
    }
}

impl WNetConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.base_channels == 0 || self.out_channels == 0 {
            return Err(NnError::Shape("wnet channel counts must be >= 1".into()));
        }
        if self.depth > 8 {
            return Err(NnError::Shape("wnet depth above 8 is not supported".into()));
        }
        Ok(())
    }
}

/// Smallest multiple of `2^depth` that is at least `n`.
pub fn pad_for_depth(n: usize, depth: usize) -> usize {
    let m = 1usize << depth;
    n.div_ceil(m) * m
}

/// Valid (unpadded) extent of an `n`-sized table at pyramid level `level`.
pub fn valid_extent(n: usize, level: usize) -> usize {
    let mut v = n;
    for _ in 0..level {
        v = v.div_ceil(2);
    }
    v
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            w: store.register_uniform(&format!("{name}.w"), &[9 * cin, cout], 9 * cin, rng)?,
            b: store.register_uniform(&format!("{name}.b"), &[cout], 9 * cin, rng)?,
        })
    }
}

/// Two 3x3 convolutions with GELU, masked to the valid region after each.
#[derive(Debug, Clone)]
struct ConvBlock {
    c1: Conv,
    c2: Conv,
}

impl ConvBlock {
    fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            c1: Conv::new(store, &format!("{name}.conv1"), cin, cout, rng)?,
            c2: Conv::new(store, &format!("{name}.conv2"), cout, cout, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, valid: usize) -> Result<Var, NnError> {
        let mut x = x;
        for c in [&self.c1, &self.c2] {
            let (w, b) = (tape.param(c.w), tape.param(c.b));
            let y = tape.conv2d_3x3(x, w, b)?;
            let y = tape.gelu(y)?;
            x = tape.mask_cells(y, valid, valid)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct Contracting {
    levels: Vec<ConvBlock>,
}

impl Contracting {
    fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        cin: usize,
        cfg: &WNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        let mut levels = Vec::with_capacity(cfg.depth);
        let mut c = cin;
        for l in 0..cfg.depth {
            let cout = cfg.base_channels << l;
            levels.push(ConvBlock::new(store, &format!("{name}.level{l}"), c, cout, rng)?);
            c = cout;
        }
        Ok(Self { levels })
    }

    /// Returns per-level skip features and the pooled deepest features.
    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, n: usize) -> Result<(Vec<Var>, Var), NnError> {
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut x = x;
        for (l, block) in self.levels.iter().enumerate() {
            let valid = valid_extent(n, l);
            x = block.forward(tape, x, valid)?;
            skips.push(x);
            x = tape.maxpool_2x2_within(x, valid, valid)?;
        }
        Ok((skips, x))
    }
}

#[derive(Debug, Clone)]
enum Body {
    Net {
        encoders: Vec<Contracting>,
        bottleneck: ConvBlock,
        decoder: Vec<ConvBlock>,
    },
    Projection,
}

#[derive(Debug, Clone)]
pub struct WNet {
    cfg: WNetConfig,
    body: Body,
    out_w: ParamId,
    out_b: ParamId,
    v_channels: usize,
    k_channels: usize,
}

impl WNet {
    /// `v_channels` and `k_channels` are the input widths; `k_channels` is
    /// ignored unless attention input is enabled.
    pub fn new<T: Scalar>(
        cfg: &WNetConfig,
        v_channels: usize,
        k_channels: usize,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        cfg.validate()?;
        let k_channels = if cfg.use_attention_input { k_channels } else { 0 };
        let (body, last) = if cfg.enabled {
            let encoders = match (k_channels > 0, cfg.fusion) {
                (true, Fusion::Dual) => vec![
                    Contracting::new(store, "wnet.venc", v_channels, cfg, rng)?,
                    Contracting::new(store, "wnet.kenc", k_channels, cfg, rng)?,
                ],
                (true, Fusion::Single) => vec![Contracting::new(store, "wnet.enc", v_channels + k_channels, cfg, rng)?],
                (false, _) => vec![Contracting::new(store, "wnet.venc", v_channels, cfg, rng)?],
            };
            let streams = encoders.len();
            let deep_in = if cfg.depth == 0 {
                v_channels + k_channels
            } else {
                streams * (cfg.base_channels << (cfg.depth - 1))
            };
            let bott_out = cfg.base_channels << cfg.depth;
            let bottleneck = ConvBlock::new(store, "wnet.bottleneck", deep_in, bott_out, rng)?;
            let mut decoder = Vec::with_capacity(cfg.depth);
            let mut up = bott_out;
            for l in (0..cfg.depth).rev() {
                let cout = cfg.base_channels << l;
                let cin = up + streams * cout;
                decoder.push(ConvBlock::new(store, &format!("wnet.dec.level{l}"), cin, cout, rng)?);
                up = cout;
            }
            (
                Body::Net {
                    encoders,
                    bottleneck,
                    decoder,
                },
                up,
            )
        } else {
            (Body::Projection, v_channels + k_channels)
        };
        let out_w = store.register_uniform("wnet.out.w", &[last, cfg.out_channels], last, rng)?;
        let out_b = store.register_uniform("wnet.out.b", &[cfg.out_channels], last, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            body,
            out_w,
            out_b,
            v_channels,
            k_channels,
        })
    }

    pub fn config(&self) -> &WNetConfig {
        &self.cfg
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.out_channels
    }

    pub fn uses_attention(&self) -> bool {
        self.k_channels > 0
    }

    /// Maps `V: [n, n, v]` (and `K: [n, n, k]` when attention input is on)
    /// to `U: [n, n, u]`. Tables are zero-padded internally and cropped back.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, v: Var, k: Option<Var>) -> Result<Var, NnError> {
        let n = tape.shape(v).first().copied().unwrap_or(0);
        self.forward_within(tape, v, k, n)
    }

    /// Like [`WNet::forward`] for inputs already padded to `[m, m, _]` with
    /// the sentence in the top-left `n x n` block. Cells outside that block
    /// are ignored whatever they hold; the result is `[n, n, u]`.
    pub fn forward_within<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        v: Var,
        k: Option<Var>,
        n: usize,
    ) -> Result<Var, NnError> {
        let sv = tape.shape(v).to_vec();
        if sv.len() != 3 || sv[0] != sv[1] || sv[2] != self.v_channels || n > sv[0] {
            return Err(NnError::Shape(format!(
                "wnet expects V [m, m, {}] with m >= {n}, got {sv:?}",
                self.v_channels
            )));
        }
        let m = sv[0];
        let k = match (self.k_channels > 0, k) {
            (true, Some(k)) => {
                if tape.shape(k) != [m, m, self.k_channels] {
                    return Err(NnError::Shape(format!(
                        "wnet expects K [{m}, {m}, {}], got {:?}",
                        self.k_channels,
                        tape.shape(k)
                    )));
                }
                Some(k)
            }
            (true, None) => return Err(NnError::Shape("wnet needs the attention table".into())),
            (false, _) => None,
        };
        let features = match &self.body {
            Body::Projection => {
                let x = match k {
                    Some(k) => tape.concat(&[v, k], 2)?,
                    None => v,
                };
                tape.resize_table(x, n, n)?
            }
            Body::Net {
                encoders,
                bottleneck,
                decoder,
            } => {
                let size = pad_for_depth(n, self.cfg.depth);
                let inputs: Vec<Var> = match (k, self.cfg.fusion) {
                    (Some(k), Fusion::Dual) => vec![v, k],
                    (Some(k), Fusion::Single) => vec![tape.concat(&[v, k], 2)?],
                    (None, _) => vec![v],
                };
                let mut skips: Vec<Vec<Var>> = Vec::with_capacity(inputs.len());
                let mut deep = Vec::with_capacity(inputs.len());
                for (enc, x) in encoders.iter().zip(inputs) {
                    let x = tape.mask_cells(x, n, n)?;
                    let x = tape.resize_table(x, size, size)?;
                    let (s, d) = enc.forward(tape, x, n)?;
                    skips.push(s);
                    deep.push(d);
                }
                let depth = self.cfg.depth;
                let deep = concat_or_single(tape, &deep)?;
                let mut x = bottleneck.forward(tape, deep, valid_extent(n, depth))?;
                for (block, l) in decoder.iter().zip((0..depth).rev()) {
                    let valid = valid_extent(n, l);
                    let up = tape.upsample_nearest_2x(x)?;
                    let up = tape.mask_cells(up, valid, valid)?;
                    let mut parts = vec![up];
                    parts.extend(skips.iter().map(|s| s[l]));
                    let cat = tape.concat(&parts, 2)?;
                    x = block.forward(tape, cat, valid)?;
                }
                tape.resize_table(x, n, n)?
            }
        };
        let c = tape.shape(features)[2];
        let flat = tape.reshape(features, &[n * n, c])?;
        let (w, b) = (tape.param(self.out_w), tape.param(self.out_b));
        let u = tape.linear(flat, w, Some(b))?;
        tape.reshape(u, &[n, n, self.cfg.out_channels])
    }
}

fn concat_or_single<T: Scalar>(tape: &mut Tape<'_, T>, xs: &[Var]) -> Result<Var, NnError> {
    if xs.len() == 1 {
        Ok(xs[0])
    } else {
        tape.concat(xs, 2)
    }
}
