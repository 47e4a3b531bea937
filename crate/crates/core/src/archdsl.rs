//! Text notation for linear-chain convolutional architectures.
//!
//! An architecture is a list of stages separated by `;`. Each stage is a
//! `+`-joined chain of blocks:
//!
//! ```text
//! yfnet_d: (7,64)/2+3/3; (1x3+3x1,128)x2+2/2; (1x3+3x1,256)x3+3/3; (1x3+3x1,512)x2+(1x3+3x1,256)
//! ```
//!
//! * `(s,n)` is a convolution with an `s×s` filter and `n` output channels,
//! * `(1x3+3x1,n)` is a factored convolution: two layers applied in order,
//! * `/k` after a convolution sets the stride (default 1),
//! * `xk` after a convolution repeats it `k` times without sharing weights,
//! * `m/s` is a max-pooling layer with window `m` and stride `s`.
//!
//! Whitespace is insignificant and `×` is accepted for `x`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::HeadConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("zero channel count at offset {offset}")]
    ZeroChannels { offset: usize },
    #[error("zero filter size at offset {offset}")]
    ZeroFilter { offset: usize },
    #[error("zero {what} at offset {offset}")]
    ZeroValue { offset: usize, what: &'static str },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match *self {
            ParseError::Syntax { offset, .. }
            | ParseError::ZeroChannels { offset }
            | ParseError::ZeroFilter { offset }
            | ParseError::ZeroValue { offset, .. } => offset,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpandError {
    #[error("input geometry must be positive, got {0}")]
    InvalidGeometry(Geometry),
    #[error("spatial size collapses to zero at stage {stage}, layer {layer} ({detail})")]
    Collapsed { stage: usize, layer: usize, detail: String },
    #[error("invalid head configuration: {0}")]
    InvalidHead(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterShape {
    Square(usize),
    /// Two sub-filters `(h, w)`, applied in notation order.
    Factored { first: (usize, usize), second: (usize, usize) },
}

impl FilterShape {
    /// The `(height, width)` of each conv layer one application produces.
    pub fn sublayers(&self) -> Vec<(usize, usize)> {
        match *self {
            FilterShape::Square(s) => vec![(s, s)],
            FilterShape::Factored { first, second } => vec![first, second],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filter: FilterShape,
    pub channels: usize,
    pub stride: usize,
    pub repeat: usize,
}

impl ConvBlock {
    pub fn square(size: usize, channels: usize) -> Self {
        ConvBlock { filter: FilterShape::Square(size), channels, stride: 1, repeat: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolBlock {
    pub window: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Conv(ConvBlock),
    Pool(PoolBlock),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub stages: Vec<Vec<Block>>,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), ParseError> {
        let first = self.stages.first().and_then(|s| s.first());
        if !matches!(first, Some(Block::Conv(_))) {
            return Err(ParseError::Syntax {
                offset: 0,
                message: "the first block of the first stage must be a convolution".into(),
            });
        }
        if self.stages.iter().any(|s| s.is_empty()) {
            return Err(ParseError::Syntax { offset: 0, message: "empty stage".into() });
        }
        Ok(())
    }
}

/// Parses the stage notation (without a `name:` prefix).
pub fn parse_arch(name: &str, text: &str) -> Result<ArchSpec, ParseError> {
    let mut parser = Parser::new(text, 0);
    let stages = parser.stages()?;
    let spec = ArchSpec { name: name.trim().to_string(), stages };
    spec.validate()?;
    Ok(spec)
}

/// Parses an architecture file: `name ':' stage (';' stage)*`. Lines whose
/// first non-blank character is `#` are ignored.
pub fn parse_arch_file(text: &str) -> Result<ArchSpec, ParseError> {
    let mut cleaned = String::with_capacity(text.len());
    for line in text.split_inclusive('\n') {
        if line.trim_start().starts_with('#') {
            // keep offsets stable
            cleaned.extend(line.chars().map(|c| if c == '\n' { '\n' } else { ' ' }));
        } else {
            cleaned.push_str(line);
        }
    }
    let colon = cleaned.find(':').ok_or_else(|| ParseError::Syntax {
        offset: 0,
        message: "expected `name:` before the stage list".into(),
    })?;
    let name = cleaned[..colon].trim();
    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || "_-.".contains(c)) {
        return Err(ParseError::Syntax { offset: 0, message: format!("invalid name `{name}`") });
    }
    let mut parser = Parser::new(&cleaned[colon + 1..], colon + 1);
    let stages = parser.stages()?;
    let spec = ArchSpec { name: name.to_string(), stages };
    spec.validate()?;
    Ok(spec)
}

/// Canonical notation of the stage list; defaults (`/1`, `x1`) are elided.
pub fn render_arch(spec: &ArchSpec) -> String {
    spec.stages
        .iter()
        .map(|stage| stage.iter().map(render_block).collect::<Vec<_>>().join("+"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// `name: stages`, the architecture file form.
pub fn render_arch_file(spec: &ArchSpec) -> String {
    format!("{}: {}\n", spec.name, render_arch(spec))
}

fn render_block(block: &Block) -> String {
    match block {
        Block::Conv(c) => {
            let filter = match c.filter {
                FilterShape::Square(s) => s.to_string(),
                FilterShape::Factored { first, second } => {
                    format!("{}x{}+{}x{}", first.0, first.1, second.0, second.1)
                }
            };
            let mut out = format!("({},{})", filter, c.channels);
            if c.stride != 1 {
                out.push_str(&format!("/{}", c.stride));
            }
            if c.repeat != 1 {
                out.push_str(&format!("x{}", c.repeat));
            }
            out
        }
        Block::Pool(p) => format!("{}/{}", p.window, p.stride),
    }
}

struct Parser {
    // significant characters with their byte offsets in the source
    chars: Vec<(usize, char)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn new(text: &str, base: usize) -> Self {
        let chars: Vec<(usize, char)> = text
            .char_indices()
            .filter(|(_, c)| !c.is_whitespace())
            .map(|(i, c)| (i + base, if c == '×' || c == 'X' { 'x' } else { c }))
            .collect();
        Parser { chars, pos: 0, end: base + text.len() }
    }

    fn offset(&self) -> usize {
        self.chars.get(self.pos).map_or(self.end, |&(o, _)| o)
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax { offset: self.offset(), message: message.into() })
    }

    fn expect(&mut self, want: char) -> Result<(), ParseError> {
        match self.peek() {
            Some(c) if c == want => {
                self.pos += 1;
                Ok(())
            }
            Some(c) => self.error(format!("expected `{want}`, found `{c}`")),
            None => self.error(format!("expected `{want}`, found end of input")),
        }
    }

    fn eat(&mut self, want: char) -> bool {
        if self.peek() == Some(want) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn int(&mut self) -> Result<(usize, usize), ParseError> {
        let start = self.offset();
        let mut value: usize = 0;
        let mut digits = 0;
        while let Some(d) = self.peek().and_then(|c| c.to_digit(10)) {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(d as usize))
                .ok_or(ParseError::Syntax { offset: start, message: "integer overflow".into() })?;
            digits += 1;
            self.pos += 1;
        }
        if digits == 0 {
            return match self.peek() {
                Some(c) => self.error(format!("expected an integer, found `{c}`")),
                None => self.error("expected an integer, found end of input"),
            };
        }
        Ok((value, start))
    }

    fn positive(&mut self, what: &'static str) -> Result<usize, ParseError> {
        let (v, offset) = self.int()?;
        if v == 0 {
            return Err(ParseError::ZeroValue { offset, what });
        }
        Ok(v)
    }

    fn filter_dim(&mut self) -> Result<usize, ParseError> {
        let (v, offset) = self.int()?;
        if v == 0 {
            return Err(ParseError::ZeroFilter { offset });
        }
        Ok(v)
    }

    fn stages(&mut self) -> Result<Vec<Vec<Block>>, ParseError> {
        let mut stages = vec![self.stage()?];
        while self.eat(';') {
            stages.push(self.stage()?);
        }
        if let Some(c) = self.peek() {
            return self.error(format!("unexpected `{c}`"));
        }
        Ok(stages)
    }

    fn stage(&mut self) -> Result<Vec<Block>, ParseError> {
        let mut blocks = vec![self.block()?];
        while self.eat('+') {
            blocks.push(self.block()?);
        }
        Ok(blocks)
    }

    fn block(&mut self) -> Result<Block, ParseError> {
        match self.peek() {
            Some('(') => self.conv().map(Block::Conv),
            Some(c) if c.is_ascii_digit() => {
                let window = self.positive("pool window")?;
                self.expect('/')?;
                let stride = self.positive("pool stride")?;
                Ok(Block::Pool(PoolBlock { window, stride }))
            }
            Some(c) => self.error(format!("expected a block, found `{c}`")),
            None => self.error("expected a block, found end of input"),
        }
    }

    fn conv(&mut self) -> Result<ConvBlock, ParseError> {
        self.expect('(')?;
        let a = self.filter_dim()?;
        let filter = if self.eat('x') {
            let b = self.filter_dim()?;
            self.expect('+')?;
            let c = self.filter_dim()?;
            self.expect('x')?;
            let d = self.filter_dim()?;
            FilterShape::Factored { first: (a, b), second: (c, d) }
        } else {
            FilterShape::Square(a)
        };
        self.expect(',')?;
        let (channels, offset) = self.int()?;
        if channels == 0 {
            return Err(ParseError::ZeroChannels { offset });
        }
        self.expect(')')?;
        let stride = if self.eat('/') { self.positive("stride")? } else { 1 };
        let repeat = if self.eat('x') { self.positive("repeat count")? } else { 1 };
        Ok(ConvBlock { filter, channels, stride, repeat })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Geometry {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Geometry { height, width, channels }
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl std::str::FromStr for Geometry {
    type Err = String;

    /// `HxWxC`, e.g. `221x221x3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(['x', 'X', '×']).collect();
        if parts.len() != 3 {
            return Err(format!("expected HxWxC, got `{s}`"));
        }
        let mut dims = [0usize; 3];
        for (dim, part) in dims.iter_mut().zip(&parts) {
            *dim = part.trim().parse().map_err(|_| format!("invalid dimension `{part}` in `{s}`"))?;
        }
        Ok(Geometry::new(dims[0], dims[1], dims[2]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// No padding.
    Valid,
    /// Pads so that the output is `ceil(input / stride)`; odd totals put
    /// the extra row/column at the bottom/right.
    Same,
}

impl Padding {
    /// `(before, after)` padding along one axis.
    pub fn amounts(self, input: usize, filter: usize, stride: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + filter).saturating_sub(input);
                (total / 2, total - total / 2)
            }
        }
    }

    /// Output length along one axis, `None` if the window does not fit.
    pub fn output_len(self, input: usize, filter: usize, stride: usize) -> Option<usize> {
        let (a, b) = self.amounts(input, filter, stride);
        let padded = input + a + b;
        if padded < filter || stride == 0 {
            None
        } else {
            Some((padded - filter) / stride + 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Pool,
    Spp { levels: Vec<usize> },
    Fc,
    BatchNorm,
    Relu,
    Dropout { rate: f64 },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Pool => "pool",
            LayerKind::Spp { .. } => "spp",
            LayerKind::Fc => "fc",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Dropout { .. } => "dropout",
        }
    }
}

/// One fully resolved layer. Fully-connected layers use channels for
/// features and a 1×1 spatial extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedLayer {
    pub kind: LayerKind,
    /// 1-based stage index, 0 for the classifier head.
    pub stage: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub input: Geometry,
    pub layers: Vec<ResolvedLayer>,
    /// Output geometry at the end of each stage.
    pub stage_outputs: Vec<Geometry>,
}

impl LayerPlan {
    pub fn output_features(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels * l.out_h * l.out_w)
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv).count()
    }
}

fn elementwise(kind: LayerKind, prev: &ResolvedLayer) -> ResolvedLayer {
    ResolvedLayer {
        kind,
        stage: prev.stage,
        in_channels: prev.out_channels,
        out_channels: prev.out_channels,
        filter_h: 1,
        filter_w: 1,
        stride: 1,
        padding: Padding::Valid,
        in_h: prev.out_h,
        in_w: prev.out_w,
        out_h: prev.out_h,
        out_w: prev.out_w,
    }
}

/// Resolves every layer of `spec` followed by the classifier head.
///
/// The first convolution of the network is unpadded; every later
/// convolution pads to preserve its input size (`ceil(input / stride)`).
/// Pooling keeps only fully covered windows. Each conv and fc layer is
/// followed by batchnorm and relu, hidden fc layers additionally by dropout
/// when the head's rate is positive. The final fc emits raw logits.
pub fn expand_layers(spec: &ArchSpec, input: Geometry, head: &HeadConfig) -> Result<LayerPlan, ExpandError> {
    if input.height == 0 || input.width == 0 || input.channels == 0 {
        return Err(ExpandError::InvalidGeometry(input));
    }
    head.validate().map_err(ExpandError::InvalidHead)?;
    spec.validate().map_err(|e| ExpandError::InvalidHead(e.to_string()))?;

    let mut layers: Vec<ResolvedLayer> = Vec::new();
    let mut stage_outputs = Vec::with_capacity(spec.stages.len());
    let (mut h, mut w, mut c) = (input.height, input.width, input.channels);
    let mut first_conv = true;

    for (si, stage) in spec.stages.iter().enumerate() {
        let stage_no = si + 1;
        for block in stage {
            match *block {
                Block::Conv(conv) => {
                    for _ in 0..conv.repeat {
                        // a factored block acts as one conv: the whole first
                        // application is unpadded and only its first sub-layer strides
                        let padding = if first_conv { Padding::Valid } else { Padding::Same };
                        first_conv = false;
                        for (k, (fh, fw)) in conv.filter.sublayers().into_iter().enumerate() {
                            let stride = if k == 0 { conv.stride } else { 1 };
                            let collapsed = || ExpandError::Collapsed {
                                stage: stage_no,
                                layer: layers.len(),
                                detail: format!("{fh}x{fw} conv on {h}x{w}"),
                            };
                            let oh = padding.output_len(h, fh, stride).ok_or_else(collapsed)?;
                            let ow = padding.output_len(w, fw, stride).ok_or_else(collapsed)?;
                            let layer = ResolvedLayer {
                                kind: LayerKind::Conv,
                                stage: stage_no,
                                in_channels: c,
                                out_channels: conv.channels,
                                filter_h: fh,
                                filter_w: fw,
                                stride,
                                padding,
                                in_h: h,
                                in_w: w,
                                out_h: oh,
                                out_w: ow,
                            };
                            let bn = elementwise(LayerKind::BatchNorm, &layer);
                            let relu = elementwise(LayerKind::Relu, &layer);
                            layers.extend([layer, bn, relu]);
                            h = oh;
                            w = ow;
                            c = conv.channels;
                        }
                    }
                }
                Block::Pool(pool) => {
                    let collapsed = || ExpandError::Collapsed {
                        stage: stage_no,
                        layer: layers.len(),
                        detail: format!("{}/{} pool on {h}x{w}", pool.window, pool.stride),
                    };
                    let oh = Padding::Valid.output_len(h, pool.window, pool.stride).ok_or_else(collapsed)?;
                    let ow = Padding::Valid.output_len(w, pool.window, pool.stride).ok_or_else(collapsed)?;
                    layers.push(ResolvedLayer {
                        kind: LayerKind::Pool,
                        stage: stage_no,
                        in_channels: c,
                        out_channels: c,
                        filter_h: pool.window,
                        filter_w: pool.window,
                        stride: pool.stride,
                        padding: Padding::Valid,
                        in_h: h,
                        in_w: w,
                        out_h: oh,
                        out_w: ow,
                    });
                    h = oh;
                    w = ow;
                }
            }
        }
        stage_outputs.push(Geometry::new(h, w, c));
    }

    let bins: usize = head.spp_levels.iter().map(|l| l * l).sum();
    layers.push(ResolvedLayer {
        kind: LayerKind::Spp { levels: head.spp_levels.clone() },
        stage: 0,
        in_channels: c,
        out_channels: c * bins,
        filter_h: 1,
        filter_w: 1,
        stride: 1,
        padding: Padding::Valid,
        in_h: h,
        in_w: w,
        out_h: 1,
        out_w: 1,
    });
    let mut features = c * bins;
    let widths = head.hidden_fc_widths.iter().map(|&w| (w, true)).chain([(head.num_classes, false)]);
    for (width, hidden) in widths {
        let fc = ResolvedLayer {
            kind: LayerKind::Fc,
            stage: 0,
            in_channels: features,
            out_channels: width,
            filter_h: 1,
            filter_w: 1,
            stride: 1,
            padding: Padding::Valid,
            in_h: 1,
            in_w: 1,
            out_h: 1,
            out_w: 1,
        };
        let mut tail = Vec::new();
        if hidden {
            tail.push(elementwise(LayerKind::BatchNorm, &fc));
            tail.push(elementwise(LayerKind::Relu, &fc));
            if head.dropout_rate > 0.0 {
                tail.push(elementwise(LayerKind::Dropout { rate: head.dropout_rate }, &fc));
            }
        }
        layers.push(fc);
        layers.extend(tail);
        features = width;
    }

    let plan = LayerPlan { input, layers, stage_outputs };
    debug_assert!(channels_chain(&plan), "channel chaining violated");
    Ok(plan)
}

/// Every layer consumes what the previous one produced.
pub fn channels_chain(plan: &LayerPlan) -> bool {
    plan.layers.windows(2).all(|pair| {
        let (a, b) = (&pair[0], &pair[1]);
        let produced = if b.kind == LayerKind::Fc { a.out_channels * a.out_h * a.out_w } else { a.out_channels };
        produced == b.in_channels && a.out_h == b.in_h && a.out_w == b.in_w
    })
}

/// Architectures shipped with the crate, in the order of the complexity table.
pub fn builtin_architectures() -> Vec<(&'static str, &'static str)> {
    vec![
        ("yfnet_a", include_str!("../architectures/yfnet_a.arch")),
        ("yfnet_b", include_str!("../architectures/yfnet_b.arch")),
        ("yfnet_c", include_str!("../architectures/yfnet_c.arch")),
        ("ctc_a", include_str!("../architectures/ctc_a.arch")),
        ("ctc_j", include_str!("../architectures/ctc_j.arch")),
        ("yfnet_d", include_str!("../architectures/yfnet_d.arch")),
    ]
}

pub fn builtin(name: &str) -> Option<ArchSpec> {
    let text = match name {
        "yfnet_d_desk" => include_str!("../architectures/yfnet_d_desk.arch"),
        _ => builtin_architectures().into_iter().find(|(n, _)| *n == name)?.1,
    };
    parse_arch_file(text).ok()
}
