//! Declarative architecture description.

use std::fmt;
use std::str::FromStr;

use crate::config::{join_list, KeyValues};
use crate::error::{Error, Result};
use crate::neuron::{MlfConfig, DEFAULT_DECAY, DEFAULT_V_TH1, DEFAULT_WIDTH};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockVariant {
    /// Activation after the shortcut addition.
    SpikingResnet,
    /// Activation before the shortcut addition (dormant-suppressed).
    DsResnet,
    /// Activation after addition with tdBN on every shortcut.
    ResnetSnn,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 3] = [
        BlockVariant::SpikingResnet,
        BlockVariant::DsResnet,
        BlockVariant::ResnetSnn,
    ];
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockVariant::SpikingResnet => "spiking-resnet",
            BlockVariant::DsResnet => "ds-resnet",
            BlockVariant::ResnetSnn => "resnet-snn",
        })
    }
}

impl FromStr for BlockVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spiking-resnet" => Ok(BlockVariant::SpikingResnet),
            "ds-resnet" => Ok(BlockVariant::DsResnet),
            "resnet-snn" => Ok(BlockVariant::ResnetSnn),
            other => Err(Error::Config(format!("unknown block variant `{other}`"))),
        }
    }
}

/// Initial channel count of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Width {
    Small,
    Middle,
    Large,
    Custom(usize),
}

impl Width {
    pub fn base_channels(self) -> usize {
        match self {
            Width::Small => 16,
            Width::Middle => 32,
            Width::Large => 64,
            Width::Custom(c) => c,
        }
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Width::Small => f.write_str("small"),
            Width::Middle => f.write_str("middle"),
            Width::Large => f.write_str("large"),
            Width::Custom(c) => write!(f, "{c}"),
        }
    }
}

impl FromStr for Width {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Width::Small),
            "middle" => Ok(Width::Middle),
            "large" => Ok(Width::Large),
            other => other
                .parse()
                .ok()
                .filter(|&c| c > 0)
                .map(Width::Custom)
                .ok_or_else(|| Error::Config(format!("unknown width `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Stem, `stages × depth_n` residual blocks, global pool, classifier.
    ResNet,
    /// VGG16-style plain stack (13 conv layers, stride-2 convs instead of pooling).
    PlainVgg16,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::ResNet => "resnet",
            Architecture::PlainVgg16 => "plain-vgg16",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(Architecture::ResNet),
            "plain-vgg16" => Ok(Architecture::PlainVgg16),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub arch: Architecture,
    /// Blocks per stage; a three-stage ResNet has `6N + 2` layers.
    pub depth_n: usize,
    pub width: Width,
    pub variant: BlockVariant,
    pub neuron: MlfConfig,
    pub classes: usize,
    /// Per-timestep input `(C, H, W)`.
    pub input_shape: [usize; 3],
    pub timesteps: usize,
    pub stages: usize,
    /// Kernel of the projection shortcut used where a block changes shape.
    pub shortcut_kernel: usize,
    /// Stride of the first block of the first stage.
    pub first_stage_stride: usize,
}

impl NetworkSpec {
    /// A `(6N + 2)`-layer three-stage ResNet with the default neuron.
    pub fn resnet(layers: usize, width: Width, variant: BlockVariant, levels: usize) -> Result<Self> {
        if layers < 8 || (layers - 2) % 6 != 0 {
            return Err(Error::Config(format!(
                "ResNet depth must be 6N+2 with N ≥ 1, got {layers}"
            )));
        }
        let spec = Self {
            arch: Architecture::ResNet,
            depth_n: (layers - 2) / 6,
            width,
            variant,
            neuron: MlfConfig::standard(levels.max(1)),
            classes: 10,
            input_shape: [3, 32, 32],
            timesteps: 4,
            stages: 3,
            shortcut_kernel: 1,
            first_stage_stride: 1,
        };
        if levels == 0 {
            return Err(Error::Config("MLF needs at least one level".into()));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn vgg16(width: Width, levels: usize) -> Result<Self> {
        let mut spec = Self::resnet(8, width, BlockVariant::SpikingResnet, levels)?;
        spec.arch = Architecture::PlainVgg16;
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_input(mut self, input_shape: [usize; 3], classes: usize, timesteps: usize) -> Self {
        self.input_shape = input_shape;
        self.classes = classes;
        self.timesteps = timesteps;
        self
    }

    pub fn with_neuron(mut self, neuron: MlfConfig) -> Self {
        self.neuron = neuron;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.neuron.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.depth_n == 0 {
            return bad("net.depth_n must be at least 1".into());
        }
        if self.stages == 0 {
            return bad("net.stages must be at least 1".into());
        }
        if self.width.base_channels() == 0 {
            return bad("net.width must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("net.classes must be at least 2, got {}", self.classes));
        }
        if self.timesteps == 0 {
            return bad("net.timesteps must be at least 1".into());
        }
        if self.input_shape.contains(&0) {
            return bad(format!("net.input_shape has a zero dimension: {:?}", self.input_shape));
        }
        if !matches!(self.shortcut_kernel, 1 | 3) {
            return bad(format!("net.shortcut_kernel must be 1 or 3, got {}", self.shortcut_kernel));
        }
        if !matches!(self.first_stage_stride, 1 | 2) {
            return bad(format!(
                "net.first_stage_stride must be 1 or 2, got {}",
                self.first_stage_stride
            ));
        }
        Ok(())
    }

    /// Number of weight layers counted the usual way (stem + convs + classifier).
    pub fn layer_count(&self) -> usize {
        match self.arch {
            Architecture::ResNet => 2 * self.stages * self.depth_n + 2,
            Architecture::PlainVgg16 => 14,
        }
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        let base = self.width.base_channels();
        (0..self.stages).map(|s| base << s).collect()
    }

    /// Per-timestep output size of every conv layer, in execution order.
    pub fn conv_layers(&self) -> Vec<ConvLayerShape> {
        let [cin0, h0, w0] = self.input_shape;
        let mut layers = Vec::new();
        let base = self.width.base_channels();
        let push = |layers: &mut Vec<ConvLayerShape>, name: String, stage, k, cin, cout, stride, h: usize, w: usize| {
            let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
            layers.push(ConvLayerShape {
                name,
                stage,
                kernel: k,
                in_channels: cin,
                out_channels: cout,
                stride,
                out_h: oh,
                out_w: ow,
            });
            (oh, ow)
        };
        let (mut h, mut w) = push(&mut layers, "conv1".into(), 0, 3, cin0, base, 1, h0, w0);
        match self.arch {
            Architecture::ResNet => {
                let mut cin = base;
                for (s, cout) in self.stage_channels().into_iter().enumerate() {
                    for b in 0..self.depth_n {
                        let stride = self.block_stride(s, b);
                        let name = format!("conv{}_{}", s + 2, b + 1);
                        let (oh, ow) = push(&mut layers, format!("{name}.a"), s + 1, 3, cin, cout, stride, h, w);
                        push(&mut layers, format!("{name}.b"), s + 1, 3, cout, cout, 1, oh, ow);
                        if stride != 1 || cin != cout {
                            push(
                                &mut layers,
                                format!("{name}.shortcut"),
                                s + 1,
                                self.shortcut_kernel,
                                cin,
                                cout,
                                stride,
                                h,
                                w,
                            );
                        }
                        (h, w, cin) = (oh, ow, cout);
                    }
                }
            }
            Architecture::PlainVgg16 => {
                let mut cin = base;
                for (i, (cout, stride)) in vgg16_plan(base).into_iter().enumerate() {
                    let stage = vgg_stage(i);
                    (h, w) = push(&mut layers, format!("plain{}", i + 2), stage, 3, cin, cout, stride, h, w);
                    cin = cout;
                }
            }
        }
        layers
    }

    pub(crate) fn block_stride(&self, stage: usize, block: usize) -> usize {
        match (stage, block) {
            (0, 0) => self.first_stage_stride,
            (_, 0) => 2,
            _ => 1,
        }
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("net.arch", self.arch);
        kv.insert("net.depth_n", self.depth_n);
        kv.insert("net.width", self.width);
        kv.insert("net.variant", self.variant);
        kv.insert("net.classes", self.classes);
        kv.insert("net.input_shape", join_list(&self.input_shape));
        kv.insert("net.timesteps", self.timesteps);
        kv.insert("net.stages", self.stages);
        kv.insert("net.shortcut_kernel", self.shortcut_kernel);
        kv.insert("net.first_stage_stride", self.first_stage_stride);
        kv.insert("neuron.thresholds", join_list(self.neuron.thresholds()));
        kv.insert("neuron.width", self.neuron.width());
        kv.insert("neuron.decay", self.neuron.decay());
        kv.insert("neuron.allow_overlap", self.neuron.allow_overlap());
        kv
    }

    /// Reads the `net.*` and `neuron.*` keys, consuming them from `kv`.
    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let arch = kv.take_or("net.arch", Architecture::ResNet)?;
        let depth_n = match (kv.take::<usize>("net.depth_n")?, kv.take::<usize>("net.layers")?) {
            (Some(n), None) => n,
            (None, Some(layers)) => {
                if layers < 8 || (layers - 2) % 6 != 0 {
                    return Err(Error::Config(format!(
                        "key `net.layers`: depth must be 6N+2, got {layers}"
                    )));
                }
                (layers - 2) / 6
            }
            (None, None) => 3,
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "keys `net.depth_n` and `net.layers` are mutually exclusive".into(),
                ))
            }
        };
        let input: Vec<usize> = kv.take_list("net.input_shape")?.unwrap_or(vec![3, 32, 32]);
        let input_shape: [usize; 3] = input.try_into().map_err(|v: Vec<usize>| {
            Error::Config(format!("key `net.input_shape` needs 3 entries, got {}", v.len()))
        })?;
        let width = kv.take_or("neuron.width", DEFAULT_WIDTH)?;
        let decay = kv.take_or("neuron.decay", DEFAULT_DECAY)?;
        let allow_overlap = kv.take_or("neuron.allow_overlap", false)?;
        let levels: Option<usize> = kv.take("neuron.levels")?;
        let v_th1: Option<f64> = kv.take("neuron.v_th1")?;
        let neuron = match kv.take_list::<f64>("neuron.thresholds")? {
            Some(t) => {
                if levels.is_some_and(|k| k != t.len()) {
                    return Err(Error::Config(
                        "key `neuron.levels` disagrees with `neuron.thresholds`".into(),
                    ));
                }
                if v_th1.is_some() {
                    return Err(Error::Config(
                        "keys `neuron.v_th1` and `neuron.thresholds` are mutually exclusive".into(),
                    ));
                }
                MlfConfig::with_thresholds(t, width, decay, allow_overlap)
            }
            None => {
                let k = levels.unwrap_or(1);
                let v = v_th1.unwrap_or(DEFAULT_V_TH1);
                MlfConfig::with_thresholds(
                    (0..k).map(|i| v + i as f64 * width).collect(),
                    width,
                    decay,
                    allow_overlap,
                )
            }
        }
        .map_err(|e| Error::Config(format!("neuron section: {e}")))?;
        let spec = Self {
            arch,
            depth_n,
            width: kv.take_or("net.width", Width::Small)?,
            variant: kv.take_or("net.variant", BlockVariant::DsResnet)?,
            neuron,
            classes: kv.take_or("net.classes", 10)?,
            input_shape,
            timesteps: kv.take_or("net.timesteps", 4)?,
            stages: kv.take_or("net.stages", 3)?,
            shortcut_kernel: kv.take_or("net.shortcut_kernel", 1)?,
            first_stage_stride: kv.take_or("net.first_stage_stride", 1)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerShape {
    pub name: String,
    /// 0 for the encoding layer, `s` for the `s`-th feature-map stage.
    pub stage: usize,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `(out_channels, stride)` for the twelve convs after the VGG16 stem.
pub(crate) fn vgg16_plan(base: usize) -> Vec<(usize, usize)> {
    let mut plan = vec![(base, 1)];
    for (i, (mult, reps)) in [(2, 2), (4, 3), (8, 3), (8, 3)].into_iter().enumerate() {
        for r in 0..reps {
            let stride = if r == 0 && i < 3 { 2 } else { 1 };
            plan.push((base * mult, stride));
        }
    }
    plan
}

pub(crate) fn vgg_stage(index: usize) -> usize {
    match index {
        0 => 1,
        1..=2 => 2,
        3..=5 => 3,
        _ => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_must_be_six_n_plus_two() {
        assert!(NetworkSpec::resnet(20, Width::Small, BlockVariant::DsResnet, 3).is_ok());
        assert!(matches!(
            NetworkSpec::resnet(18, Width::Small, BlockVariant::DsResnet, 3),
            Err(Error::Config(_))
        ));
        assert!(NetworkSpec::resnet(2, Width::Small, BlockVariant::DsResnet, 3).is_err());
    }

    #[test]
    fn channel_plan() {
        let s = NetworkSpec::resnet(14, Width::Small, BlockVariant::DsResnet, 1).unwrap();
        assert_eq!(s.layer_count(), 14);
        assert_eq!(s.stage_channels(), vec![16, 32, 64]);
        let l = NetworkSpec::resnet(20, Width::Large, BlockVariant::DsResnet, 1).unwrap();
        assert_eq!(l.layer_count(), 20);
        assert_eq!(l.stage_channels(), vec![64, 128, 256]);
        let layers = l.conv_layers();
        let strides: Vec<(String, usize)> = layers
            .iter()
            .filter(|c| c.stride == 2)
            .map(|c| (c.name.clone(), c.out_h))
            .collect();
        assert_eq!(
            strides,
            vec![
                ("conv3_1.a".to_string(), 16),
                ("conv3_1.shortcut".to_string(), 16),
                ("conv4_1.a".to_string(), 8),
                ("conv4_1.shortcut".to_string(), 8),
            ]
        );
    }

    #[test]
    fn vgg_plan_has_thirteen_convs() {
        let s = NetworkSpec::vgg16(Width::Custom(4), 2).unwrap();
        assert_eq!(s.conv_layers().len(), 13);
        assert_eq!(s.layer_count(), 14);
    }

    #[test]
    fn key_value_roundtrip() {
        let mut s = NetworkSpec::resnet(32, Width::Middle, BlockVariant::ResnetSnn, 2)
            .unwrap()
            .with_input([2, 8, 8], 4, 8);
        s.shortcut_kernel = 3;
        let mut kv = KeyValues::parse(&s.to_key_values().render()).unwrap();
        let back = NetworkSpec::from_key_values(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn bad_keys_are_config_errors() {
        for text in [
            "net.variant = resnet-50",
            "net.layers = 21",
            "neuron.levels = 2\nneuron.thresholds = 0.6,1.1",
            "net.width = tiny",
            "neuron.width = -1",
        ] {
            let mut kv = KeyValues::parse(text).unwrap();
            assert!(
                matches!(NetworkSpec::from_key_values(&mut kv), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
