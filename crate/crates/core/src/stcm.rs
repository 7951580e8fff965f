//! Spatio-temporal convolution stack: a strided 5×5 stem, two stages of
//! pre-activation BN-ReLU-Conv blocks, global average pooling and the
//! softmax classifier head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    softmax_rows, BnMode, BnState, Scalar, Tape, Tensor, TensorError, TensorId,
};

/// Network depth by total conv-layer count: one stem layer plus two conv
/// layers per block, two stages of equal block count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Mans9,
    Mans33,
    Mans61,
    /// Same 9-layer structure with narrow stages; keeps exhaustive
    /// finite-difference sweeps tractable.
    Mans9Reduced,
}

impl Depth {
    pub fn blocks_per_stage(self) -> usize {
        match self {
            Depth::Mans9 | Depth::Mans9Reduced => 2,
            Depth::Mans33 => 8,
            Depth::Mans61 => 15,
        }
    }

    /// Channel widths of (stem + stage 1, stage 2).
    pub fn stage_channels(self) -> (usize, usize) {
        match self {
            Depth::Mans9Reduced => (4, 8),
            _ => (64, 128),
        }
    }

    pub fn conv_layers(self) -> usize {
        1 + 4 * self.blocks_per_stage()
    }

    pub fn name(self) -> &'static str {
        match self {
            Depth::Mans9 => "mans9",
            Depth::Mans33 => "mans33",
            Depth::Mans61 => "mans61",
            Depth::Mans9Reduced => "mans9-reduced",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mans9" => Some(Depth::Mans9),
            "mans33" => Some(Depth::Mans33),
            "mans61" => Some(Depth::Mans61),
            "mans9-reduced" => Some(Depth::Mans9Reduced),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StcmConfig {
    pub depth: Depth,
    pub use_shortcuts: bool,
    pub num_classes: usize,
}

/// One batch-norm layer: learnable scale/shift plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub state: BnState<F>,
}

impl<F: Scalar> BnLayer<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(vec![channels], F::one()),
            beta: Tensor::zeros(vec![channels]),
            state: BnState::new(channels),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    fn visit_state<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        f(format!("{prefix}.running_mean"), &self.state.running_mean);
        f(format!("{prefix}.running_var"), &self.state.running_var);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.running_mean"), &mut self.state.running_mean);
        f(format!("{prefix}.running_var"), &mut self.state.running_var);
    }

    fn forward(
        &mut self,
        tape: &mut Tape<F>,
        prefix: &str,
        x: TensorId,
        mode: BnMode,
        trainable: bool,
    ) -> Result<TensorId, TensorError> {
        let g = tape.named_leaf(&format!("{prefix}.gamma"), &self.gamma, trainable);
        let b = tape.named_leaf(&format!("{prefix}.beta"), &self.beta, trainable);
        tape.batchnorm2d(x, g, b, &mut self.state, mode)
    }
}

/// Two BN-ReLU-Conv triples with an optional projection shortcut. The
/// first conv carries the block's stride; projections appear exactly when
/// the input shape would not match the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<F> {
    pub bn1: BnLayer<F>,
    pub conv1: Tensor<F>,
    pub bn2: BnLayer<F>,
    pub conv2: Tensor<F>,
    pub proj: Option<Tensor<F>>,
    pub stride: usize,
}

fn conv_init<F: Scalar>(
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<F> {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    let data = (0..c_out * c_in * k * k)
        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(vec![c_out, c_in, k, k], data).expect("matching shape")
}

impl<F: Scalar> ConvBlock<F> {
    fn init(c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = if stride != 1 || c_in != c_out {
            Some(conv_init(c_out, c_in, 1, rng))
        } else {
            None
        };
        Self {
            bn1: BnLayer::new(c_in),
            conv1: conv_init(c_out, c_in, 3, rng),
            bn2: BnLayer::new(c_out),
            conv2: conv_init(c_out, c_out, 3, rng),
            proj,
            stride,
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        f(format!("{prefix}.conv1.k"), &self.conv1);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        f(format!("{prefix}.conv2.k"), &self.conv2);
        if let Some(p) = &self.proj {
            f(format!("{prefix}.proj.k"), p);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.bn1.visit_mut(&format!("{prefix}.bn1"), f);
        f(format!("{prefix}.conv1.k"), &mut self.conv1);
        self.bn2.visit_mut(&format!("{prefix}.bn2"), f);
        f(format!("{prefix}.conv2.k"), &mut self.conv2);
        if let Some(p) = &mut self.proj {
            f(format!("{prefix}.proj.k"), p);
        }
    }
}

/// `Conv(ReLU(BN(Conv(ReLU(BN(x))))))` plus the shortcut when enabled.
pub fn conv_block_forward<F: Scalar>(
    tape: &mut Tape<F>,
    block: &mut ConvBlock<F>,
    prefix: &str,
    x: TensorId,
    mode: BnMode,
    use_shortcuts: bool,
    trainable: bool,
) -> Result<TensorId, TensorError> {
    let a1 = block.bn1.forward(tape, &format!("{prefix}.bn1"), x, mode, trainable)?;
    let r1 = tape.relu(a1);
    let k1 = tape.named_leaf(&format!("{prefix}.conv1.k"), &block.conv1, trainable);
    let c1 = tape.conv2d(r1, k1, block.stride, 1)?;

    let a2 = block.bn2.forward(tape, &format!("{prefix}.bn2"), c1, mode, trainable)?;
    let r2 = tape.relu(a2);
    let k2 = tape.named_leaf(&format!("{prefix}.conv2.k"), &block.conv2, trainable);
    let c2 = tape.conv2d(r2, k2, 1, 1)?;

    if !use_shortcuts {
        return Ok(c2);
    }
    let shortcut = match &block.proj {
        Some(pk) => {
            let pid = tape.named_leaf(&format!("{prefix}.proj.k"), pk, trainable);
            tape.conv2d(x, pid, block.stride, 0)?
        }
        None => x,
    };
    tape.add(c2, shortcut)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StcmParams<F> {
    pub config: StcmConfig,
    pub stem_bn: BnLayer<F>,
    pub stem_conv: Tensor<F>,
    pub stage1: Vec<ConvBlock<F>>,
    pub stage2: Vec<ConvBlock<F>>,
    pub final_bn: BnLayer<F>,
    pub fc_w: Tensor<F>,
    pub fc_b: Tensor<F>,
}

impl<F: Scalar> StcmParams<F> {
    pub fn init(config: StcmConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c1, c2) = config.depth.stage_channels();
        let blocks = config.depth.blocks_per_stage();
        let stage1 = (0..blocks).map(|_| ConvBlock::init(c1, c1, 1, rng)).collect();
        let stage2 = (0..blocks)
            .map(|i| {
                if i == 0 {
                    ConvBlock::init(c1, c2, 2, rng)
                } else {
                    ConvBlock::init(c2, c2, 1, rng)
                }
            })
            .collect();
        let fc_bound = 1.0 / (c2 as f64).sqrt();
        let fc_w = Tensor::new(
            vec![c2, config.num_classes],
            (0..c2 * config.num_classes)
                .map(|_| F::from_f64(rng.gen_range(-fc_bound..fc_bound)))
                .collect(),
        )
        .expect("matching shape");
        Self {
            config,
            stem_bn: BnLayer::new(3),
            stem_conv: conv_init(c1, 3, 5, rng),
            stage1,
            stage2,
            final_bn: BnLayer::new(c2),
            fc_w,
            fc_b: Tensor::zeros(vec![config.num_classes]),
        }
    }

    pub fn feature_width(&self) -> usize {
        self.config.depth.stage_channels().1
    }

    /// Learnable parameters in checkpoint naming order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.stem_bn.visit("stcm.stem.bn", f);
        f("stcm.stem.conv.k".to_string(), &self.stem_conv);
        for (i, b) in self.stage1.iter().enumerate() {
            b.visit(&format!("stcm.s1.b{i}"), f);
        }
        for (i, b) in self.stage2.iter().enumerate() {
            b.visit(&format!("stcm.s2.b{i}"), f);
        }
        self.final_bn.visit("stcm.final_bn", f);
        f("stcm.fc.w".to_string(), &self.fc_w);
        f("stcm.fc.b".to_string(), &self.fc_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.stem_bn.visit_mut("stcm.stem.bn", f);
        f("stcm.stem.conv.k".to_string(), &mut self.stem_conv);
        for (i, b) in self.stage1.iter_mut().enumerate() {
            b.visit_mut(&format!("stcm.s1.b{i}"), f);
        }
        for (i, b) in self.stage2.iter_mut().enumerate() {
            b.visit_mut(&format!("stcm.s2.b{i}"), f);
        }
        self.final_bn.visit_mut("stcm.final_bn", f);
        f("stcm.fc.w".to_string(), &mut self.fc_w);
        f("stcm.fc.b".to_string(), &mut self.fc_b);
    }

    /// Batch-norm running statistics (checkpointed but not trained).
    pub fn visit_state<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.stem_bn.visit_state("stcm.stem.bn", f);
        for (i, b) in self.stage1.iter().enumerate() {
            b.bn1.visit_state(&format!("stcm.s1.b{i}.bn1"), f);
            b.bn2.visit_state(&format!("stcm.s1.b{i}.bn2"), f);
        }
        for (i, b) in self.stage2.iter().enumerate() {
            b.bn1.visit_state(&format!("stcm.s2.b{i}.bn1"), f);
            b.bn2.visit_state(&format!("stcm.s2.b{i}.bn2"), f);
        }
        self.final_bn.visit_state("stcm.final_bn", f);
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.stem_bn.visit_state_mut("stcm.stem.bn", f);
        for (i, b) in self.stage1.iter_mut().enumerate() {
            b.bn1.visit_state_mut(&format!("stcm.s1.b{i}.bn1"), f);
            b.bn2.visit_state_mut(&format!("stcm.s1.b{i}.bn2"), f);
        }
        for (i, b) in self.stage2.iter_mut().enumerate() {
            b.bn1.visit_state_mut(&format!("stcm.s2.b{i}.bn1"), f);
            b.bn2.visit_state_mut(&format!("stcm.s2.b{i}.bn2"), f);
        }
        self.final_bn.visit_state_mut("stcm.final_bn", f);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

/// Features plus the spatial trace of every stage, for shape regression.
pub struct StcmOutput {
    pub features: TensorId,
    pub trace: Vec<(String, Vec<usize>)>,
}

/// Full convolutional trunk: stem, both stages, final BN-ReLU, global
/// average pooling down to `B×C` features.
pub fn stcm_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &mut StcmParams<F>,
    x: TensorId,
    mode: BnMode,
    trainable: bool,
) -> Result<StcmOutput, TensorError> {
    let in_shape = tape.value(x).shape().to_vec();
    if in_shape.len() != 4 || in_shape[1] != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "stcm_forward",
            left: in_shape,
            right: vec![0, 3, 0, 0],
        });
    }
    let mut trace = vec![("input".to_string(), in_shape)];
    let use_shortcuts = params.config.use_shortcuts;

    let a = params
        .stem_bn
        .forward(tape, "stcm.stem.bn", x, mode, trainable)?;
    let r = tape.relu(a);
    let k = tape.named_leaf("stcm.stem.conv.k", &params.stem_conv, trainable);
    let mut cur = tape.conv2d(r, k, 2, 2)?;
    trace.push(("stem".to_string(), tape.value(cur).shape().to_vec()));

    for (i, block) in params.stage1.iter_mut().enumerate() {
        cur = conv_block_forward(
            tape,
            block,
            &format!("stcm.s1.b{i}"),
            cur,
            mode,
            use_shortcuts,
            trainable,
        )?;
        trace.push((format!("s1.b{i}"), tape.value(cur).shape().to_vec()));
    }
    for (i, block) in params.stage2.iter_mut().enumerate() {
        cur = conv_block_forward(
            tape,
            block,
            &format!("stcm.s2.b{i}"),
            cur,
            mode,
            use_shortcuts,
            trainable,
        )?;
        trace.push((format!("s2.b{i}"), tape.value(cur).shape().to_vec()));
    }

    let a = params
        .final_bn
        .forward(tape, "stcm.final_bn", cur, mode, trainable)?;
    let r = tape.relu(a);
    let pooled_w = tape.reduce_mean(r, 3)?;
    let features = tape.reduce_mean(pooled_w, 2)?;
    trace.push(("pool".to_string(), tape.value(features).shape().to_vec()));
    Ok(StcmOutput { features, trace })
}

/// Classifier head: affine logits plus their softmax probabilities. The
/// probabilities are a plain value (argmax/accuracy plumbing); gradients
/// flow through the logits.
pub fn classify<F: Scalar>(
    tape: &mut Tape<F>,
    params: &StcmParams<F>,
    features: TensorId,
    trainable: bool,
) -> Result<(TensorId, Tensor<F>), TensorError> {
    let w = tape.named_leaf("stcm.fc.w", &params.fc_w, trainable);
    let b = tape.named_leaf("stcm.fc.b", &params.fc_b, trainable);
    let logits = tape.affine(features, w, b)?;
    let probs = softmax_rows(tape.value(logits));
    Ok((logits, probs))
}
