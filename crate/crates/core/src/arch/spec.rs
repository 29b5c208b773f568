use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ArchError;

/// Spatial level of a feature map: A..D sit at 1/4 .. 1/32 of the input.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    A,
    B,
    C,
    D,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::A, Level::B, Level::C, Level::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Level> {
        Self::ALL.get(i).copied()
    }

    /// Output stride of the level in an undilated backbone.
    pub fn stride(self) -> usize {
        4 << self.index()
    }

    /// The next coarser level.
    pub fn below(self) -> Option<Level> {
        Self::from_index(self.index() + 1)
    }

    /// The next finer level.
    pub fn above(self) -> Option<Level> {
        self.index().checked_sub(1).and_then(Self::from_index)
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Block,
    Head,
    Classifier,
}

/// Grid coordinate of a block. Heads and classifiers sit one column past
/// the block that feeds them.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId {
    pub level: Level,
    pub column: u8,
    pub role: Role,
}

impl BlockId {
    pub const fn new(level: Level, column: u8) -> Self {
        Self {
            level,
            column,
            role: Role::Block,
        }
    }

    pub const fn head(level: Level, column: u8) -> Self {
        Self {
            level,
            column,
            role: Role::Head,
        }
    }

    pub const fn classifier(level: Level, column: u8) -> Self {
        Self {
            level,
            column,
            role: Role::Classifier,
        }
    }

    /// Unambiguous form used in JSON: `A2`, `head@A5`, `fc@D1`.
    pub fn key(&self) -> String {
        match self.role {
            Role::Block => self.to_string(),
            Role::Head => format!("head@{}{}", self.level, self.column),
            Role::Classifier => format!("fc@{}{}", self.level, self.column),
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            Role::Block => write!(f, "{}{}", self.level, self.column),
            Role::Head => f.write_str("head"),
            Role::Classifier => f.write_str("fc"),
        }
    }
}

fn parse_coord(s: &str) -> Option<(Level, u8)> {
    let mut chars = s.chars();
    let level = match chars.next()?.to_ascii_uppercase() {
        'A' => Level::A,
        'B' => Level::B,
        'C' => Level::C,
        'D' => Level::D,
        _ => return None,
    };
    let column = chars.as_str().parse().ok()?;
    Some((level, column))
}

impl FromStr for BlockId {
    type Err = ArchError;

    /// Parses the [`BlockId::key`] form. Bare `head`/`fc` need a graph to
    /// resolve; see `BlockGraph::resolve`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ArchError::UnknownBlock(s.to_string());
        if let Some(rest) = s.strip_prefix("head@") {
            let (l, c) = parse_coord(rest).ok_or_else(bad)?;
            return Ok(BlockId::head(l, c));
        }
        if let Some(rest) = s.strip_prefix("fc@") {
            let (l, c) = parse_coord(rest).ok_or_else(bad)?;
            return Ok(BlockId::classifier(l, c));
        }
        let (l, c) = parse_coord(s).ok_or_else(bad)?;
        Ok(BlockId::new(l, c))
    }
}

impl Serialize for BlockId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fcn,
    Segnet,
    Wnet,
    Shelfnet,
    ShelfnetLw,
    ShelfnetSimplified,
    GridnetSimplified,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Fcn,
        Variant::Segnet,
        Variant::Wnet,
        Variant::Shelfnet,
        Variant::ShelfnetLw,
        Variant::ShelfnetSimplified,
        Variant::GridnetSimplified,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fcn => "fcn",
            Variant::Segnet => "segnet",
            Variant::Wnet => "wnet",
            Variant::Shelfnet => "shelfnet",
            Variant::ShelfnetLw => "shelfnet_lw",
            Variant::ShelfnetSimplified => "shelfnet_simplified",
            Variant::GridnetSimplified => "gridnet_simplified",
        }
    }

    /// Weightless comparison graphs that are only analysed, never run.
    pub fn is_simplified(self) -> bool {
        matches!(self, Variant::ShelfnetSimplified | Variant::GridnetSimplified)
    }

    /// Spatial levels the shelf columns occupy.
    pub fn shelf_levels(self) -> &'static [Level] {
        match self {
            Variant::ShelfnetLw => &[Level::B, Level::C, Level::D],
            _ => &Level::ALL,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ArchError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    ResnetBasic,
    ResnetBottleneck,
    /// Basic-block ResNet at toy width, for desk-scale training.
    Mini,
}

/// A four-stage ResNet-style encoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    pub blocks: [usize; 4],
    /// Channel width of the first stage before bottleneck expansion.
    pub base_width: usize,
    /// Replace the strides of stages 3 and 4 with dilation 2 and 4.
    pub dilated: bool,
}

impl BackboneSpec {
    /// Standard ResNet of the given depth (18, 34, 50, 101 or 152).
    pub fn resnet(depth: usize) -> Result<Self, ArchError> {
        let (family, blocks) = match depth {
            18 => (BackboneFamily::ResnetBasic, [2, 2, 2, 2]),
            34 => (BackboneFamily::ResnetBasic, [3, 4, 6, 3]),
            50 => (BackboneFamily::ResnetBottleneck, [3, 4, 6, 3]),
            101 => (BackboneFamily::ResnetBottleneck, [3, 4, 23, 3]),
            152 => (BackboneFamily::ResnetBottleneck, [3, 8, 36, 3]),
            _ => return Err(ArchError::Config(format!("no standard ResNet of depth {depth}"))),
        };
        Ok(Self {
            family,
            blocks,
            base_width: 64,
            dilated: false,
        })
    }

    pub fn mini(base_width: usize, blocks_per_stage: usize) -> Self {
        Self {
            family: BackboneFamily::Mini,
            blocks: [blocks_per_stage; 4],
            base_width,
            dilated: false,
        }
    }

    pub fn dilated(mut self) -> Self {
        self.dilated = true;
        self
    }

    /// Parses names such as `resnet18`, `resnet50-dilated`, `mini8`.
    pub fn parse(name: &str) -> Result<Self, ArchError> {
        let (base, dilated) = match name.strip_suffix("-dilated") {
            Some(b) => (b, true),
            None => (name, false),
        };
        let spec = if let Some(d) = base.strip_prefix("resnet") {
            let depth = d
                .parse()
                .map_err(|_| ArchError::Config(format!("unknown backbone {name:?}")))?;
            Self::resnet(depth)?
        } else if let Some(w) = base.strip_prefix("mini") {
            let width = if w.is_empty() { 8 } else {
                w.parse().map_err(|_| ArchError::Config(format!("unknown backbone {name:?}")))?
            };
            Self::mini(width, 1)
        } else {
            return Err(ArchError::Config(format!("unknown backbone {name:?}")));
        };
        Ok(if dilated { spec.dilated() } else { spec })
    }

    pub fn name(&self) -> String {
        let base = match (self.family, self.blocks) {
            (BackboneFamily::ResnetBasic, [2, 2, 2, 2]) if self.base_width == 64 => "resnet18".to_string(),
            (BackboneFamily::ResnetBasic, [3, 4, 6, 3]) if self.base_width == 64 => "resnet34".to_string(),
            (BackboneFamily::ResnetBottleneck, [3, 4, 6, 3]) if self.base_width == 64 => "resnet50".to_string(),
            (BackboneFamily::ResnetBottleneck, [3, 4, 23, 3]) if self.base_width == 64 => "resnet101".to_string(),
            (BackboneFamily::ResnetBottleneck, [3, 8, 36, 3]) if self.base_width == 64 => "resnet152".to_string(),
            (BackboneFamily::Mini, b) if b.iter().all(|&x| x == 1) => format!("mini{}", self.base_width),
            (f, b) => format!("{f:?}{b:?}w{}", self.base_width).to_lowercase(),
        };
        if self.dilated {
            format!("{base}-dilated")
        } else {
            base
        }
    }

    pub fn expansion(&self) -> usize {
        match self.family {
            BackboneFamily::ResnetBottleneck => 4,
            _ => 1,
        }
    }

    /// Output channels of stage `i`.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_width * (1 << i) * self.expansion()
    }

    /// Output stride of stage `i`: 4, 8, 16, 32, or 4, 8, 8, 8 when dilated.
    pub fn stage_stride(&self, i: usize) -> usize {
        if self.dilated {
            (4 << i).min(8)
        } else {
            4 << i
        }
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        if self.base_width == 0 || self.blocks.contains(&0) {
            return Err(ArchError::Config(format!(
                "backbone needs positive width and block counts, got {:?} width {}",
                self.blocks, self.base_width
            )));
        }
        Ok(())
    }
}

/// Declarative description of one ShelfNet-family network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShelfSpec {
    pub variant: Variant,
    /// Shelf channel width per level, finest first; three entries for the
    /// light-weight variant (B..D), four otherwise.
    pub channels: Vec<usize>,
    pub backbone: BackboneSpec,
    pub num_classes: usize,
    /// Dropout probability between the two convolutions of an S-block.
    pub dropout: f64,
    /// `false` builds the unshared twin: two kernels per S-block.
    pub shared_weights: bool,
}

impl ShelfSpec {
    /// Full-size network with the channel widths 64, 128, 256, 512.
    pub fn new(variant: Variant, backbone: BackboneSpec, num_classes: usize) -> Self {
        let channels = match variant {
            Variant::ShelfnetLw => vec![128, 256, 512],
            _ => vec![64, 128, 256, 512],
        };
        Self {
            variant,
            channels,
            backbone,
            num_classes,
            dropout: 0.25,
            shared_weights: true,
        }
    }

    /// Toy network on a mini backbone whose shelf widths equal the backbone
    /// widths: `width`, `2 width`, ...
    pub fn mini(variant: Variant, width: usize, num_classes: usize) -> Self {
        let all: Vec<usize> = (0..4).map(|i| width << i).collect();
        let channels = match variant {
            Variant::ShelfnetLw => all[1..].to_vec(),
            _ => all,
        };
        Self {
            variant,
            channels,
            backbone: BackboneSpec::mini(width, 1),
            num_classes,
            dropout: 0.1,
            shared_weights: true,
        }
    }

    pub fn with_channels(mut self, channels: Vec<usize>) -> Self {
        self.channels = channels;
        self
    }

    pub fn unshared(mut self) -> Self {
        self.shared_weights = false;
        self
    }

    pub fn levels(&self) -> &'static [Level] {
        self.variant.shelf_levels()
    }

    pub fn width(&self, level: Level) -> Option<usize> {
        let levels = self.levels();
        levels.iter().position(|&l| l == level).and_then(|i| self.channels.get(i).copied())
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let levels = self.levels();
        if self.channels.len() != levels.len() {
            return Err(ArchError::Config(format!(
                "variant {} spans {} levels but {} channel widths were given",
                self.variant,
                levels.len(),
                self.channels.len()
            )));
        }
        if self.channels[0] == 0 {
            return Err(ArchError::Config("channel widths must be positive".into()));
        }
        for pair in self.channels.windows(2) {
            if pair[1] != 2 * pair[0] {
                return Err(ArchError::Config(format!(
                    "channel widths must double per level, got {:?}",
                    self.channels
                )));
            }
        }
        if !self.variant.is_simplified() {
            self.backbone.validate()?;
            if self.backbone.dilated {
                return Err(ArchError::Config(
                    "shelf variants need an undilated backbone: level strides must be 4, 8, 16, 32".into(),
                ));
            }
            if self.num_classes < 2 || self.num_classes > 255 {
                return Err(ArchError::Config(format!(
                    "num_classes must lie in [2, 255], got {}",
                    self.num_classes
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ArchError::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}
