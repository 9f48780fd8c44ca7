use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{Architecture, ModelSpec};
use super::ModelError;
use crate::autodiff::{BatchMoments, BnMode, Eager, Graph, RunningStats, Tape, Var};
use crate::image::Image;
use crate::optim::Parameter;
use crate::tensor::Tensor;

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffer {
    pub name: String,
    pub stats: RunningStats,
}

/// A built network: its spec, trainable parameters in construction order,
/// and batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    pub(crate) params: Vec<Parameter>,
    pub(crate) buffers: Vec<BnBuffer>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Parameter>,
    buffers: Vec<BnBuffer>,
}

impl Builder {
    /// He-style fan-in initialization, zero bias.
    fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize) {
        let fan_in = (in_ch * 9) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let kernel = Tensor::from_fn(&[out_ch, in_ch, 3, 3], |_| normal.sample(&mut self.rng));
        self.params.push(Parameter::new(format!("{name}.weight"), kernel));
        self.params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
    }

    fn bn(&mut self, name: &str, ch: usize) {
        self.params.push(Parameter::new(format!("{name}.gamma"), Tensor::full(&[ch], 1.0)));
        self.params.push(Parameter::new(format!("{name}.beta"), Tensor::zeros(&[ch])));
        self.buffers.push(BnBuffer {
            name: name.to_string(),
            stats: RunningStats::uninitialized(ch),
        });
    }
}

/// Walks parameters and buffers in construction order during a forward pass.
struct Cursor<'a, N> {
    params: &'a [N],
    next_param: usize,
    next_buffer: usize,
}

impl<'a, N> Cursor<'a, N> {
    fn pair(&mut self) -> (&'a N, &'a N) {
        let i = self.next_param;
        self.next_param += 2;
        (&self.params[i], &self.params[i + 1])
    }

    fn buffer(&mut self) -> usize {
        self.next_buffer += 1;
        self.next_buffer - 1
    }
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            buffers: Vec::new(),
        };
        let w = spec.width;
        match spec.architecture {
            Architecture::Vdcnn => {
                for i in 1..=spec.depth {
                    let in_ch = if i == 1 { spec.in_channels } else { w };
                    let out_ch = if i == spec.depth { spec.out_channels } else { w };
                    b.conv(&format!("conv{i:02}"), in_ch, out_ch);
                }
            }
            Architecture::Resnet => {
                b.conv("head", spec.in_channels, w);
                for i in 1..=spec.depth {
                    b.conv(&format!("block{i:02}.conv1"), w, w);
                    b.bn(&format!("block{i:02}.bn1"), w);
                    b.conv(&format!("block{i:02}.conv2"), w, w);
                    b.bn(&format!("block{i:02}.bn2"), w);
                }
                b.conv("post.conv", w, w);
                b.bn("post.bn", w);
                for i in 1..=spec.tail_convs {
                    b.conv(&format!("tail{i}"), w, w);
                }
                b.conv("out", w, spec.out_channels);
            }
        }
        Ok(Self {
            spec,
            params: b.params,
            buffers: b.buffers,
        })
    }

    pub(crate) fn from_parts(spec: ModelSpec, params: Vec<Parameter>, buffers: Vec<BnBuffer>) -> Self {
        Self { spec, params, buffers }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[BnBuffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [BnBuffer] {
        &mut self.buffers
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Audited from the built parameters: every 4-D tensor is a conv kernel.
    pub fn count_conv_layers(&self) -> usize {
        self.params.iter().filter(|p| p.value.shape().len() == 4).count()
    }

    pub fn receptive_field(&self) -> usize {
        self.spec.receptive_field()
    }

    pub fn batch_norm_ready(&self) -> bool {
        self.buffers.iter().all(|b| b.stats.initialized)
    }

    /// Runs the network on `input` using `params` as parameter nodes (one per
    /// entry of [`Model::params`], same order). Returns the output and, in
    /// training mode, the batch moments of every batch-norm layer.
    pub fn forward_graph<G: Graph>(
        &self,
        g: &mut G,
        input: &G::Node,
        params: &[G::Node],
        mode: BnMode,
    ) -> Result<(G::Node, Vec<BatchMoments>), ModelError> {
        assert_eq!(params.len(), self.params.len(), "one node per parameter");
        let mut cur = Cursor {
            params,
            next_param: 0,
            next_buffer: 0,
        };
        let mut moments = Vec::new();
        let conv = |g: &mut G, cur: &mut Cursor<G::Node>, x: &G::Node| {
            let (k, b) = cur.pair();
            g.conv2d(x, k, b)
        };
        let bn = |g: &mut G, cur: &mut Cursor<G::Node>, x: &G::Node, moments: &mut Vec<BatchMoments>| {
            let (gamma, beta) = cur.pair();
            let stats = &self.buffers[cur.buffer()].stats;
            let (y, m) = g.batch_norm(x, gamma, beta, stats, mode)?;
            moments.extend(m);
            Ok::<_, ModelError>(y)
        };

        let mut h = input.clone();
        let out = match self.spec.architecture {
            Architecture::Vdcnn => {
                for _ in 1..self.spec.depth {
                    let z = conv(g, &mut cur, &h)?;
                    h = g.relu(&z);
                }
                conv(g, &mut cur, &h)?
            }
            Architecture::Resnet => {
                let z = conv(g, &mut cur, &h)?;
                h = g.relu(&z);
                let head = h.clone();
                for _ in 0..self.spec.depth {
                    let r = conv(g, &mut cur, &h)?;
                    let r = bn(g, &mut cur, &r, &mut moments)?;
                    let r = g.relu(&r);
                    let r = conv(g, &mut cur, &r)?;
                    let r = bn(g, &mut cur, &r, &mut moments)?;
                    h = g.add(&h, &r)?;
                }
                let z = conv(g, &mut cur, &h)?;
                h = bn(g, &mut cur, &z, &mut moments)?;
                if self.spec.long_skip {
                    h = g.add(&h, &head)?;
                }
                drop(head);
                for _ in 0..self.spec.tail_convs {
                    let z = conv(g, &mut cur, &h)?;
                    h = g.relu(&z);
                }
                conv(g, &mut cur, &h)?
            }
        };
        let out = if self.spec.global_residual {
            g.add(&out, input)?
        } else {
            out
        };
        Ok((out, moments))
    }

    /// Training-mode forward pass on a tape. Parameters are recorded as
    /// leaves (returned in parameter order) and batch-norm running statistics
    /// are updated from this batch.
    pub fn forward_train(&mut self, tape: &mut Tape, input: Tensor) -> Result<(Var, Vec<Var>), ModelError> {
        let x = tape.leaf(input);
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let (out, moments) = self.forward_graph(tape, &x, &params, BnMode::Train)?;
        self.apply_moments(&moments);
        Ok((out, params))
    }

    pub(crate) fn apply_moments(&mut self, moments: &[BatchMoments]) {
        debug_assert_eq!(moments.len(), self.buffers.len());
        for (buf, m) in self.buffers.iter_mut().zip(moments) {
            buf.stats.update(m);
        }
    }

    /// Raw network output for an N×3×H×W batch, batch norm in inference mode.
    pub fn forward_tensor(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Eager;
        let x = g.leaf(input.clone());
        let params: Vec<_> = self.params.iter().map(|p| g.leaf(p.value.clone())).collect();
        let (out, _) = self.forward_graph(&mut g, &x, &params, BnMode::Infer)?;
        drop(params);
        Ok(std::rc::Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
    }

    /// Full-image inference; the result is clamped to `[0, 1]`.
    pub fn forward(&self, image: &Image) -> Result<Image, ModelError> {
        let out = self.forward_tensor(&image.to_tensor())?;
        Ok(Image::from_tensor(&out)?.clamp_unit())
    }

    /// Initializes batch-norm running statistics from training-mode passes
    /// over `images` without touching parameters.
    pub fn calibrate(&mut self, images: &[Image]) -> Result<(), ModelError> {
        for img in images {
            let mut g = Eager;
            let x = g.leaf(img.to_tensor());
            let params: Vec<_> = self.params.iter().map(|p| g.leaf(p.value.clone())).collect();
            let (_, moments) = self.forward_graph(&mut g, &x, &params, BnMode::Train)?;
            self.apply_moments(&moments);
        }
        Ok(())
    }
}
