//! The multimodal gaze CNN.
//!
//! ```text
//! eye ─ avgpool(ds) ─ conv1 ─ relu ─ pool ─ conv2 ─ relu ─ pool ─ fc1 ─ relu ─┐
//!                                                                  head pose ─┴─ concat ─ fc_out ─ (yaw, pitch)
//! ```
//!
//! Parameters are flattened into one [`ParamVector`] in layer order, weights
//! before biases: `conv1.w, conv1.b, conv2.w, conv2.b, fc1.w, fc1.b, out.w, out.b`.

use std::io::{Read, Write};
use std::ops::{Deref, DerefMut, Range};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Sample, EYE_HEIGHT, EYE_WIDTH};
use crate::error::{Error, Result};
use crate::tensor::{kernels, sign, ConvGeometry, Real, Tensor};

/// Flattened trainable parameters; the unit of aggregation and checkpointing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector<T>(pub Vec<T>);

impl<T> Deref for ParamVector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for ParamVector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

impl<T> From<Vec<T>> for ParamVector<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

impl<T: Real> ParamVector<T> {
    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    /// Little-endian: `u32` length, then that many `f32` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let len = u32::try_from(self.0.len())
            .map_err(|_| std::io::Error::other("parameter vector exceeds u32 length"))?;
        w.write_all(&len.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.0.len() * 4);
        for v in &self.0 {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> std::io::Result<Self> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        let mut buf = vec![0u8; len * 4];
        r.read_exact(&mut buf)?;
        Ok(Self(
            buf.chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect(),
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.0.len() * 4);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernels: usize,
    pub size: usize,
}

/// Layer sizes of the network. The eye image is average-pooled by
/// `downsample` before the first convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub image_h: usize,
    pub image_w: usize,
    pub downsample: usize,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub hidden: usize,
}

impl Architecture {
    /// LeNet-style network of the MPIIGaze lineage on full 60×36 images.
    pub const fn lenet() -> Self {
        Self {
            image_h: EYE_HEIGHT,
            image_w: EYE_WIDTH,
            downsample: 1,
            conv1: ConvSpec {
                kernels: 20,
                size: 5,
            },
            conv2: ConvSpec {
                kernels: 50,
                size: 5,
            },
            hidden: 500,
        }
    }

    /// Same topology at desk scale: 10×6 input, 4/8 kernels, 16 hidden units.
    pub const fn desk() -> Self {
        Self {
            image_h: EYE_HEIGHT,
            image_w: EYE_WIDTH,
            downsample: 6,
            conv1: ConvSpec {
                kernels: 4,
                size: 3,
            },
            conv2: ConvSpec {
                kernels: 8,
                size: 1,
            },
            hidden: 16,
        }
    }

    /// Shrunken network on 12×8 images used for gradient verification.
    pub const fn tiny() -> Self {
        Self {
            image_h: 8,
            image_w: 12,
            downsample: 1,
            conv1: ConvSpec {
                kernels: 2,
                size: 3,
            },
            conv2: ConvSpec {
                kernels: 3,
                size: 2,
            },
            hidden: 16,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "lenet" => Some(Self::lenet()),
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn plan(&self) -> Result<Plan> {
        Plan::new(*self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub range: Range<usize>,
}

/// Named ranges of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
}

impl ParamLayout {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.range.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name_of(&self, index: usize) -> Option<&'static str> {
        self.segments
            .iter()
            .find(|s| s.range.contains(&index))
            .map(|s| s.name)
    }
}

/// Resolved geometry of an [`Architecture`].
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    arch: Architecture,
    conv1: ConvGeometry,
    conv2: ConvGeometry,
    flat: usize,
    layout: ParamLayout,
}

// Offsets into the layout's segment list.
const C1W: usize = 0;
const C1B: usize = 1;
const C2W: usize = 2;
const C2B: usize = 3;
const F1W: usize = 4;
const F1B: usize = 5;
const OW: usize = 6;
const OB: usize = 7;

impl Plan {
    fn new(arch: Architecture) -> Result<Self> {
        let bad = |msg: String| Error::invalid("architecture", msg);
        let ds = arch.downsample;
        if ds == 0 || arch.image_h % ds != 0 || arch.image_w % ds != 0 {
            return Err(bad(format!(
                "downsample {ds} must divide image {}×{}",
                arch.image_h, arch.image_w
            )));
        }
        let (h, w) = (arch.image_h / ds, arch.image_w / ds);
        let conv = |c, h: usize, w: usize, spec: ConvSpec, name| -> Result<ConvGeometry> {
            if spec.kernels == 0 || spec.size == 0 || spec.size > h || spec.size > w {
                return Err(bad(format!("{name}: kernel {spec:?} does not fit {h}×{w}")));
            }
            let g = ConvGeometry {
                in_channels: c,
                height: h,
                width: w,
                kernels: spec.kernels,
                kernel_h: spec.size,
                kernel_w: spec.size,
            };
            if g.out_h() % 2 != 0 || g.out_w() % 2 != 0 {
                return Err(bad(format!(
                    "{name} output {}×{} is not poolable by 2",
                    g.out_h(),
                    g.out_w()
                )));
            }
            Ok(g)
        };
        let conv1 = conv(1, h, w, arch.conv1, "conv1")?;
        let conv2 = conv(
            arch.conv1.kernels,
            conv1.out_h() / 2,
            conv1.out_w() / 2,
            arch.conv2,
            "conv2",
        )?;
        let flat = conv2.kernels * (conv2.out_h() / 2) * (conv2.out_w() / 2);
        if arch.hidden == 0 {
            return Err(bad("hidden layer must be nonempty".into()));
        }
        let sizes = [
            ("conv1.weight", conv1.weight_len()),
            ("conv1.bias", conv1.kernels),
            ("conv2.weight", conv2.weight_len()),
            ("conv2.bias", conv2.kernels),
            ("fc1.weight", arch.hidden * flat),
            ("fc1.bias", arch.hidden),
            ("fc_out.weight", 2 * (arch.hidden + 2)),
            ("fc_out.bias", 2),
        ];
        let mut start = 0;
        let segments = sizes
            .iter()
            .map(|&(name, n)| {
                let s = Segment {
                    name,
                    range: start..start + n,
                };
                start += n;
                s
            })
            .collect();
        Ok(Self {
            arch,
            conv1,
            conv2,
            flat,
            layout: ParamLayout { segments },
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    /// Length of the (downsampled) image fed to conv1.
    pub fn input_len(&self) -> usize {
        self.conv1.height * self.conv1.width
    }

    fn seg<'a, T>(&self, params: &'a [T], i: usize) -> &'a [T] {
        &params[self.layout.segments[i].range.clone()]
    }

    fn fan_in(&self, segment: usize) -> Option<usize> {
        match segment {
            C1W => Some(self.conv1.kernel_h * self.conv1.kernel_w),
            C2W => Some(self.conv2.in_channels * self.conv2.kernel_h * self.conv2.kernel_w),
            F1W => Some(self.flat),
            OW => Some(self.arch.hidden + 2),
            _ => None,
        }
    }

    /// He-uniform weights bounded by `sqrt(6 / fan_in)`, zero biases.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamVector<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamVector::zeros(self.param_count());
        for (i, seg) in self.layout.segments.iter().enumerate() {
            if let Some(fan_in) = self.fan_in(i) {
                let bound = (6.0 / fan_in as f64).sqrt();
                for p in &mut params[seg.range.clone()] {
                    *p = T::of(rng.random_range(-bound..bound));
                }
            }
        }
        params
    }

    fn check_params<T>(&self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape {
                op: "param vector",
                left: vec![self.param_count()],
                right: vec![params.len()],
            });
        }
        Ok(())
    }

    fn forward_one<T: Real>(&self, params: &[T], input: &[T], head: &[T], ws: &mut Workspace<T>) {
        kernels::im2col(&self.conv1, input, &mut ws.cols1);
        kernels::conv2d_forward_cols(
            &self.conv1,
            &ws.cols1,
            self.seg(params, C1W),
            self.seg(params, C1B),
            &mut ws.a1,
        );
        kernels::relu_inplace(&mut ws.a1);
        kernels::maxpool2_forward(
            self.conv1.kernels,
            self.conv1.out_h(),
            self.conv1.out_w(),
            &ws.a1,
            &mut ws.p1,
            &mut ws.arg1,
        );
        kernels::im2col(&self.conv2, &ws.p1, &mut ws.cols2);
        kernels::conv2d_forward_cols(
            &self.conv2,
            &ws.cols2,
            self.seg(params, C2W),
            self.seg(params, C2B),
            &mut ws.a2,
        );
        kernels::relu_inplace(&mut ws.a2);
        kernels::maxpool2_forward(
            self.conv2.kernels,
            self.conv2.out_h(),
            self.conv2.out_w(),
            &ws.a2,
            &mut ws.p2,
            &mut ws.arg2,
        );
        let hidden = self.arch.hidden;
        kernels::dense_forward(
            &ws.p2,
            self.seg(params, F1W),
            self.seg(params, F1B),
            &mut ws.z[..hidden],
        );
        kernels::relu_inplace(&mut ws.z[..hidden]);
        ws.z[hidden] = head[0];
        ws.z[hidden + 1] = head[1];
        kernels::dense_forward(
            &ws.z,
            self.seg(params, OW),
            self.seg(params, OB),
            &mut ws.out,
        );
    }

    /// Backpropagates `ws.g_out` through the activations left by the last
    /// `forward_one`, accumulating into `grad`.
    fn backward_one<T: Real>(&self, params: &[T], ws: &mut Workspace<T>, grad: &mut [T]) {
        let hidden = self.arch.hidden;
        let segs = &self.layout.segments;
        let (head_part, tail) = grad.split_at_mut(segs[F1W].range.start);
        let (fc1_part, out_part) = tail.split_at_mut(segs[OW].range.start - segs[F1W].range.start);
        let (g_ow, g_ob) = out_part.split_at_mut(segs[OW].range.len());
        kernels::dense_backward(
            &ws.z,
            self.seg(params, OW),
            &ws.g_out,
            g_ow,
            g_ob,
            Some(&mut ws.g_z),
        );
        kernels::relu_backward_inplace(&ws.z[..hidden], &mut ws.g_z[..hidden]);
        let (g_f1w, g_f1b) = fc1_part.split_at_mut(segs[F1W].range.len());
        kernels::dense_backward(
            &ws.p2,
            self.seg(params, F1W),
            &ws.g_z[..hidden],
            g_f1w,
            g_f1b,
            Some(&mut ws.g_p2),
        );
        kernels::maxpool2_backward(&ws.arg2, &ws.g_p2, &mut ws.g_a2);
        kernels::relu_backward_inplace(&ws.a2, &mut ws.g_a2);
        let (conv1_part, conv2_part) = head_part.split_at_mut(segs[C2W].range.start);
        let (g_c2w, g_c2b) = conv2_part.split_at_mut(segs[C2W].range.len());
        kernels::conv2d_backward_cols(
            &self.conv2,
            &ws.cols2,
            self.seg(params, C2W),
            &ws.g_a2,
            g_c2w,
            g_c2b,
            Some(&mut ws.g_cols2),
        );
        kernels::col2im(&self.conv2, &ws.g_cols2, &mut ws.g_p1);
        kernels::maxpool2_backward(&ws.arg1, &ws.g_p1, &mut ws.g_a1);
        kernels::relu_backward_inplace(&ws.a1, &mut ws.g_a1);
        let (g_c1w, g_c1b) = conv1_part.split_at_mut(segs[C1W].range.len());
        kernels::conv2d_backward_cols(
            &self.conv1,
            &ws.cols1,
            self.seg(params, C1W),
            &ws.g_a1,
            g_c1w,
            g_c1b,
            None,
        );
    }

    /// Mean L1 loss over `indices` of `data`; the full gradient is written
    /// (overwriting) into `grad`.
    pub fn loss_and_grad<T: Real>(
        &self,
        params: &[T],
        data: &Prepared<T>,
        indices: &[usize],
        grad: &mut [T],
    ) -> Result<T> {
        self.check_params(params)?;
        self.check_params(grad)?;
        self.check_data(data)?;
        if indices.is_empty() {
            return Err(Error::invalid("loss_and_grad", "empty batch"));
        }
        grad.fill(T::zero());
        let inv_b = T::one() / T::of(indices.len() as f64);
        let mut ws = Workspace::new(self);
        let mut total = T::zero();
        for &i in indices {
            let input = data.input(i);
            self.forward_one(params, input, data.head(i), &mut ws);
            let target = data.target(i);
            for k in 0..2 {
                let d = ws.out[k] - target[k];
                total += d.abs();
                ws.g_out[k] = sign(d) * inv_b;
            }
            self.backward_one(params, &mut ws, grad);
        }
        Ok(total * inv_b)
    }

    /// Raw network outputs (`yaw`, `pitch`) for every prepared sample.
    pub fn predict_raw<T: Real>(&self, params: &[T], data: &Prepared<T>) -> Result<Vec<[T; 2]>> {
        self.check_params(params)?;
        self.check_data(data)?;
        let mut ws = Workspace::new(self);
        Ok((0..data.len())
            .map(|i| {
                self.forward_one(params, data.input(i), data.head(i), &mut ws);
                [ws.out[0], ws.out[1]]
            })
            .collect())
    }

    /// Mean L1 loss and mean angular error of `params` on `data`.
    pub fn evaluate<T: Real>(&self, params: &[T], data: &Prepared<T>) -> Result<EvalStats> {
        let preds = self.predict_raw(params, data)?;
        let n = preds.len();
        if n == 0 {
            return Err(Error::invalid("evaluate", "empty evaluation set"));
        }
        let mut loss = 0.0;
        let mut err = 0.0;
        for (i, p) in preds.iter().enumerate() {
            let t = data.target(i);
            loss += (p[0] - t[0]).abs().as_f64() + (p[1] - t[1]).abs().as_f64();
            err += angular_error_deg(
                GazePrediction::new(p[0].as_f64(), p[1].as_f64()),
                GazePrediction::new(t[0].as_f64(), t[1].as_f64()),
            );
        }
        Ok(EvalStats {
            loss: loss / n as f64,
            mae_deg: err / n as f64,
            count: n,
        })
    }

    fn check_data<T>(&self, data: &Prepared<T>) -> Result<()> {
        if data.input_len != self.input_len() {
            return Err(Error::Shape {
                op: "prepared input",
                left: vec![self.input_len()],
                right: vec![data.input_len],
            });
        }
        Ok(())
    }

    /// Downsamples a raw eye image into the network's input resolution.
    pub fn prepare_eye<T: Real>(&self, eye: &[f32], out: &mut Vec<T>) -> Result<()> {
        let (ih, iw) = (self.arch.image_h, self.arch.image_w);
        if eye.len() != ih * iw {
            return Err(Error::Shape {
                op: "eye image",
                left: vec![ih, iw],
                right: vec![eye.len()],
            });
        }
        let ds = self.arch.downsample;
        let inv = 1.0 / (ds * ds) as f64;
        for y in 0..ih / ds {
            for x in 0..iw / ds {
                let mut acc = 0.0f64;
                for dy in 0..ds {
                    let row = &eye[(y * ds + dy) * iw + x * ds..][..ds];
                    acc += row.iter().map(|&v| v as f64).sum::<f64>();
                }
                out.push(T::of(acc * inv));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub mae_deg: f64,
    pub count: usize,
}

struct Workspace<T> {
    cols1: Vec<T>,
    cols2: Vec<T>,
    g_cols2: Vec<T>,
    a1: Vec<T>,
    p1: Vec<T>,
    arg1: Vec<usize>,
    a2: Vec<T>,
    p2: Vec<T>,
    arg2: Vec<usize>,
    z: Vec<T>,
    out: [T; 2],
    g_out: [T; 2],
    g_z: Vec<T>,
    g_p2: Vec<T>,
    g_a2: Vec<T>,
    g_p1: Vec<T>,
    g_a1: Vec<T>,
}

impl<T: Real> Workspace<T> {
    fn new(plan: &Plan) -> Self {
        let z = |n| vec![T::zero(); n];
        let a1 = plan.conv1.out_len();
        let a2 = plan.conv2.out_len();
        Self {
            cols1: z(plan.conv1.cols_len()),
            cols2: z(plan.conv2.cols_len()),
            g_cols2: z(plan.conv2.cols_len()),
            a1: z(a1),
            p1: z(a1 / 4),
            arg1: vec![0; a1 / 4],
            a2: z(a2),
            p2: z(plan.flat),
            arg2: vec![0; plan.flat],
            z: z(plan.arch.hidden + 2),
            out: [T::zero(); 2],
            g_out: [T::zero(); 2],
            g_z: z(plan.arch.hidden + 2),
            g_p2: z(plan.flat),
            g_a2: z(a2),
            g_p1: z(a1 / 4),
            g_a1: z(a1),
        }
    }
}

/// Samples converted once into network precision and input resolution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Prepared<T> {
    input_len: usize,
    inputs: Vec<T>,
    heads: Vec<T>,
    targets: Vec<T>,
}

impl<T: Real> Prepared<T> {
    pub fn new(plan: &Plan, samples: &[Sample]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(samples.len() * plan.input_len());
        let mut heads = Vec::with_capacity(samples.len() * 2);
        let mut targets = Vec::with_capacity(samples.len() * 2);
        for s in samples {
            plan.prepare_eye(&s.eye, &mut inputs)?;
            heads.extend([T::of(s.head.pitch as f64), T::of(s.head.yaw as f64)]);
            targets.extend([T::of(s.gaze.yaw as f64), T::of(s.gaze.pitch as f64)]);
        }
        Ok(Self {
            input_len: plan.input_len(),
            inputs,
            heads,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, i: usize) -> &[T] {
        &self.inputs[i * self.input_len..(i + 1) * self.input_len]
    }

    /// Head pose as (pitch, yaw).
    pub fn head(&self, i: usize) -> &[T] {
        &self.heads[2 * i..2 * i + 2]
    }

    /// Ground-truth gaze as (yaw, pitch).
    pub fn target(&self, i: usize) -> &[T] {
        &self.targets[2 * i..2 * i + 2]
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Prepared<T>>) -> Self {
        let mut out = Prepared::default();
        for p in parts {
            if out.input_len == 0 {
                out.input_len = p.input_len;
            }
            debug_assert!(p.is_empty() || p.input_len == out.input_len);
            out.inputs.extend_from_slice(&p.inputs);
            out.heads.extend_from_slice(&p.heads);
            out.targets.extend_from_slice(&p.targets);
        }
        out
    }
}

/// Predicted or ground-truth gaze direction in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazePrediction {
    pub yaw: f64,
    pub pitch: f64,
}

impl GazePrediction {
    pub fn new(yaw: f64, pitch: f64) -> Self {
        Self { yaw, pitch }
    }

    /// Unit gaze vector `(−cos p·sin y, −sin p, −cos p·cos y)`.
    pub fn direction(&self) -> [f64; 3] {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        [-cp * sy, -sp, -cp * cy]
    }
}

/// Angle in degrees between the 3-D gaze directions of `pred` and `truth`.
pub fn angular_error_deg(pred: GazePrediction, truth: GazePrediction) -> f64 {
    let a = pred.direction();
    let b = truth.direction();
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    // atan2 stays accurate for near-parallel vectors where acos does not
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    sin.atan2(dot).to_degrees()
}

/// Anything that can map prepared samples to gaze predictions.
pub trait Predictor<T: Real>: Sync {
    fn predict(&self, data: &Prepared<T>) -> Result<Vec<GazePrediction>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeNet<T> {
    plan: Arc<Plan>,
    params: ParamVector<T>,
}

impl<T: Real> GazeNet<T> {
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let plan = Arc::new(arch.plan()?);
        let params = plan.init_params(seed);
        Ok(Self { plan, params })
    }

    pub fn from_params(plan: Arc<Plan>, params: ParamVector<T>) -> Result<Self> {
        plan.check_params(&params)?;
        Ok(Self { plan, params })
    }

    pub fn plan(&self) -> &Arc<Plan> {
        &self.plan
    }

    pub fn param_vector(&self) -> &ParamVector<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamVector<T> {
        self.params
    }

    /// Runs the network on raw samples, returning a `B×2` (yaw, pitch) tensor.
    pub fn forward(&self, samples: &[Sample]) -> Result<Tensor<T>> {
        let data = Prepared::new(&self.plan, samples)?;
        let out = self.plan.predict_raw(&self.params, &data)?;
        Tensor::new(vec![out.len(), 2], out.into_iter().flatten().collect())
    }

    pub fn loss_and_grad(&self, samples: &[Sample]) -> Result<(T, ParamVector<T>)> {
        if samples.is_empty() {
            return Err(Error::invalid("loss_and_grad", "empty batch"));
        }
        let data = Prepared::new(&self.plan, samples)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut grad = ParamVector::zeros(self.plan.param_count());
        let loss = self.plan.loss_and_grad(&self.params, &data, &idx, &mut grad)?;
        Ok((loss, grad))
    }
}

impl<T: Real> Predictor<T> for GazeNet<T> {
    fn predict(&self, data: &Prepared<T>) -> Result<Vec<GazePrediction>> {
        Ok(self
            .plan
            .predict_raw(&self.params, data)?
            .into_iter()
            .map(|[y, p]| GazePrediction::new(y.as_f64(), p.as_f64()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GazeAngles, HeadPose, EYE_PIXELS};
    use crate::tensor::finite_diff_grad;
    use std::f64::consts::FRAC_PI_2;

    fn sample_for(arch: &Architecture, rng: &mut ChaCha8Rng) -> Sample {
        Sample {
            eye: (0..arch.image_h * arch.image_w)
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
            head: HeadPose {
                pitch: rng.random_range(-0.3..0.3),
                yaw: rng.random_range(-0.3..0.3),
            },
            gaze: GazeAngles {
                yaw: rng.random_range(-0.5..0.5),
                pitch: rng.random_range(-0.5..0.5),
            },
        }
    }

    #[test]
    fn lenet_geometry() {
        let plan = Architecture::lenet().plan().unwrap();
        assert_eq!(plan.flat, 50 * 6 * 12);
        let expected = 20 * 25 + 20 + 50 * 20 * 25 + 50 + 500 * 3600 + 500 + 2 * 502 + 2;
        assert_eq!(plan.param_count(), expected);
        assert_eq!(plan.layout().name_of(0), Some("conv1.weight"));
        assert_eq!(plan.layout().name_of(expected - 1), Some("fc_out.bias"));
    }

    #[test]
    fn presets_are_valid() {
        for arch in [Architecture::lenet(), Architecture::desk(), Architecture::tiny()] {
            arch.plan().unwrap();
        }
        let mut bad = Architecture::tiny();
        bad.conv1.size = 2;
        assert!(bad.plan().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = GazeNet::<f64>::init(Architecture::desk(), 7).unwrap();
        let b = GazeNet::<f64>::init(Architecture::desk(), 7).unwrap();
        let c = GazeNet::<f64>::init(Architecture::desk(), 8).unwrap();
        assert_eq!(a.param_vector().to_bytes(), b.param_vector().to_bytes());
        assert_ne!(a.param_vector(), c.param_vector());
        let plan = a.plan();
        for (i, seg) in plan.layout().segments().iter().enumerate() {
            let vals = &a.param_vector()[seg.range.clone()];
            match plan.fan_in(i) {
                Some(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    assert!(vals.iter().all(|v| v.abs() <= bound), "{}", seg.name);
                }
                None => assert!(vals.iter().all(|&v| v == 0.0), "{}", seg.name),
            }
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let arch = Architecture::desk();
        let net = GazeNet::<f32>::init(arch, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<Sample> = (0..4).map(|_| sample_for(&arch, &mut rng)).collect();
        let out = net.forward(&batch).unwrap();
        assert_eq!(out.shape(), &[4, 2]);
        assert_eq!(out, net.forward(&batch).unwrap());
    }

    #[test]
    fn forward_rejects_bad_eye() {
        let net = GazeNet::<f32>::init(Architecture::desk(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = sample_for(&Architecture::desk(), &mut rng);
        s.eye.pop();
        assert!(net.forward(&[s]).is_err());
    }

    #[test]
    fn head_pose_moves_the_output() {
        let arch = Architecture::tiny();
        let net = GazeNet::<f64>::init(arch, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut base = sample_for(&arch, &mut rng);
        base.head.pitch = 0.25;
        let yaw_out = |pitch: f64| {
            let mut s = base.clone();
            s.head.pitch = pitch as f32;
            net.forward(&[s]).unwrap().data()[0]
        };
        let d = finite_diff_grad(|v| yaw_out(v[0]), &[0.25], 0.125);
        // the output layer is affine in the head pose, so the slope is its weight
        let w = net.param_vector()[net.plan().layout().segments()[OW].range.clone()][arch.hidden];
        assert!((d[0] - w).abs() < 1e-6);
        assert!(d[0].abs() > 0.0);
    }

    #[test]
    fn perfect_targets_give_zero_loss_and_gradient() {
        let arch = Architecture::tiny();
        let net = GazeNet::<f32>::init(arch, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut batch: Vec<Sample> = (0..3).map(|_| sample_for(&arch, &mut rng)).collect();
        let out = net.forward(&batch).unwrap();
        for (s, o) in batch.iter_mut().zip(out.data().chunks(2)) {
            s.gaze.yaw = o[0];
            s.gaze.pitch = o[1];
        }
        let (loss, grad) = net.loss_and_grad(&batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let arch = Architecture::tiny();
        let net = GazeNet::<f64>::init(arch, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch: Vec<Sample> = (0..6).map(|_| sample_for(&arch, &mut rng)).collect();
        let mut rev = batch.clone();
        rev.reverse();
        let (a, _) = net.loss_and_grad(&batch).unwrap();
        let (b, _) = net.loss_and_grad(&rev).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_error() {
        let net = GazeNet::<f64>::init(Architecture::tiny(), 5).unwrap();
        assert!(net.loss_and_grad(&[]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = Architecture::tiny();
        let plan = Arc::new(arch.plan().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch: Vec<Sample> = (0..3).map(|_| sample_for(&arch, &mut rng)).collect();
        let data = Prepared::<f64>::new(&plan, &batch).unwrap();
        let idx = [0, 1, 2];
        let params: ParamVector<f64> = plan.init_params(21);
        let mut grad = vec![0.0; plan.param_count()];
        plan.loss_and_grad(&params, &data, &idx, &mut grad).unwrap();
        let mut scratch = vec![0.0; plan.param_count()];
        let fd = finite_diff_grad(
            |p| plan.loss_and_grad(p, &data, &idx, &mut scratch).unwrap(),
            &params,
            1e-6,
        );
        for (i, (a, b)) in grad.iter().zip(&fd).enumerate() {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
            assert!(rel < 1e-5, "param {i}: analytic {a} vs fd {b}");
        }
    }

    #[test]
    fn angular_error_examples() {
        let zero = GazePrediction::new(0.0, 0.0);
        assert_eq!(angular_error_deg(zero, zero), 0.0);
        let e = angular_error_deg(GazePrediction::new(FRAC_PI_2, 0.0), zero);
        assert!((e - 90.0).abs() < 1e-12);
        let e = angular_error_deg(GazePrediction::new(0.0, FRAC_PI_2), zero);
        assert!((e - 90.0).abs() < 1e-12);
    }

    #[test]
    fn param_vector_round_trip() {
        let p = ParamVector(vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e7]);
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], &4u32.to_le_bytes());
        assert_eq!(ParamVector::<f32>::read_from(&bytes[..]).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn prepare_eye_averages_blocks() {
        let plan = Architecture::desk().plan().unwrap();
        let eye: Vec<f32> = (0..EYE_PIXELS).map(|i| (i % EYE_WIDTH) as f32).collect();
        let mut out: Vec<f64> = Vec::new();
        plan.prepare_eye(&eye, &mut out).unwrap();
        assert_eq!(out.len(), plan.input_len());
        // columns 0..6 average to 2.5
        assert!((out[0] - 2.5).abs() < 1e-12);
        assert!((out[1] - 8.5).abs() < 1e-12);
    }
}
