//! Text form of network architectures.
//!
//! ```text
//! spec   := layer ( "->" layer )*
//! layer  := name "[" width "]" ( "{" key "=" value ( "," key "=" value )* "}" )?
//! name   := Conv2d | DynResBlock | StatResBlock      (case-insensitive)
//! ```
//!
//! Attribute keys: `frame` (pixel, gauss, framelet, naive), `order`, `set`
//! (per_axis, total), `sigma`, `size`, `group` (rotation, scaling,
//! rotation_scaling), `pose` (block, channel), `steer` (analytic, free),
//! `hidden`. The canonical form spells names as `Conv2d`, `DynResBlock`,
//! `StatResBlock`, drops whitespace, and omits attributes equal to the
//! layer kind's defaults.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::frames::{
    make_framelet_frame, make_gaussian_derivative_frame, make_naive_frame, make_pixel_frame,
    DerivativeSet, Frame, FrameFamily,
};
use crate::group::GroupAction;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    DynResBlock,
    StatResBlock,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "Conv2d",
            LayerKind::DynResBlock => "DynResBlock",
            LayerKind::StatResBlock => "StatResBlock",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv2d" => Some(LayerKind::Conv2d),
            "dynresblock" => Some(LayerKind::DynResBlock),
            "statresblock" => Some(LayerKind::StatResBlock),
            _ => None,
        }
    }
}

/// Whether pose is estimated once per location or once per output channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseGranularity {
    PerBlock,
    PerOutputChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteeringMode {
    /// Pose passes through steering functions of the group action.
    Analytic,
    /// Pose-network outputs modulate each atom directly.
    Free,
}

/// Frame used by a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameChoice {
    pub family: FrameFamily,
    pub size: usize,
    pub order: usize,
    pub set: DerivativeSet,
    pub sigma: f64,
}

impl FrameChoice {
    /// 9-atom spanning Gaussian-derivative frame on a 3x3 grid.
    pub const SPANNING_GAUSS: FrameChoice = FrameChoice {
        family: FrameFamily::GaussianDerivative,
        size: 3,
        order: 2,
        set: DerivativeSet::PerAxis,
        sigma: 1.0,
    };

    /// Rotation-closed Gaussian derivatives up to order 2 (6 atoms).
    pub const STEERABLE_GAUSS: FrameChoice = FrameChoice {
        family: FrameFamily::GaussianDerivative,
        size: 3,
        order: 2,
        set: DerivativeSet::TotalOrder,
        sigma: 1.0,
    };

    pub fn build(&self) -> Result<Frame> {
        match self.family {
            FrameFamily::Pixel => make_pixel_frame(self.size),
            FrameFamily::GaussianDerivative => {
                make_gaussian_derivative_frame(self.size, self.sigma, self.order, self.set)
            }
            FrameFamily::Framelet => make_framelet_frame(self.size),
            FrameFamily::Naive => make_naive_frame(self.size, self.order),
            FrameFamily::Custom => Err(Error::Config(
                "custom frames cannot be named in a network spec".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
    pub frame: FrameChoice,
    pub group: GroupAction,
    pub pose: PoseGranularity,
    pub steering: SteeringMode,
    /// Hidden width of the pose network.
    pub hidden: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, width: usize) -> Self {
        let frame = match kind {
            LayerKind::DynResBlock => FrameChoice::STEERABLE_GAUSS,
            _ => FrameChoice::SPANNING_GAUSS,
        };
        Self {
            kind,
            width,
            frame,
            group: GroupAction::Rotation,
            pose: PoseGranularity::PerOutputChannel,
            steering: SteeringMode::Analytic,
            hidden: 16,
        }
    }

    fn attributes(&self) -> Vec<(&'static str, String)> {
        let d = LayerSpec::new(self.kind, self.width);
        let mut out = Vec::new();
        if self.frame.family != d.frame.family {
            out.push(("frame", family_token(self.frame.family).to_string()));
        }
        if self.frame.size != d.frame.size {
            out.push(("size", self.frame.size.to_string()));
        }
        let uses_order = matches!(self.frame.family, FrameFamily::GaussianDerivative | FrameFamily::Naive);
        if uses_order && self.frame.order != d.frame.order {
            out.push(("order", self.frame.order.to_string()));
        }
        if self.frame.family == FrameFamily::GaussianDerivative {
            if self.frame.set != d.frame.set {
                out.push(("set", self.frame.set.to_string()));
            }
            if self.frame.sigma != d.frame.sigma {
                out.push(("sigma", format!("{}", self.frame.sigma)));
            }
        }
        if self.kind == LayerKind::DynResBlock {
            if self.group != d.group {
                out.push(("group", self.group.to_string()));
            }
            if self.pose != d.pose {
                out.push((
                    "pose",
                    match self.pose {
                        PoseGranularity::PerBlock => "block",
                        PoseGranularity::PerOutputChannel => "channel",
                    }
                    .to_string(),
                ));
            }
            if self.steering != d.steering {
                out.push((
                    "steer",
                    match self.steering {
                        SteeringMode::Analytic => "analytic",
                        SteeringMode::Free => "free",
                    }
                    .to_string(),
                ));
            }
            if self.hidden != d.hidden {
                out.push(("hidden", self.hidden.to_string()));
            }
        }
        out
    }

    fn set_attribute(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let int = |v: &str| v.parse::<usize>().map_err(|_| format!("'{v}' is not a positive integer"));
        match key {
            "frame" => {
                self.frame.family = match value {
                    "pixel" => FrameFamily::Pixel,
                    "gauss" | "gaussian" => FrameFamily::GaussianDerivative,
                    "framelet" => FrameFamily::Framelet,
                    "naive" => FrameFamily::Naive,
                    other => return Err(format!("unknown frame '{other}'")),
                }
            }
            "size" => self.frame.size = int(value)?,
            "order" => self.frame.order = int(value)?,
            "set" => self.frame.set = value.parse::<DerivativeSet>().map_err(|e| e.to_string())?,
            "sigma" => {
                self.frame.sigma = value
                    .parse::<f64>()
                    .ok()
                    .filter(|s| *s > 0.0)
                    .ok_or_else(|| format!("'{value}' is not a positive number"))?
            }
            "group" if self.kind == LayerKind::DynResBlock => {
                self.group = value.parse::<GroupAction>().map_err(|e| e.to_string())?
            }
            "pose" if self.kind == LayerKind::DynResBlock => {
                self.pose = match value {
                    "block" | "per_block" => PoseGranularity::PerBlock,
                    "channel" | "per_output_channel" => PoseGranularity::PerOutputChannel,
                    other => return Err(format!("unknown pose granularity '{other}'")),
                }
            }
            "steer" if self.kind == LayerKind::DynResBlock => {
                self.steering = match value {
                    "analytic" => SteeringMode::Analytic,
                    "free" => SteeringMode::Free,
                    other => return Err(format!("unknown steering mode '{other}'")),
                }
            }
            "hidden" if self.kind == LayerKind::DynResBlock => self.hidden = int(value)?,
            other => return Err(format!("unknown attribute '{other}' for {}", self.kind.name())),
        }
        Ok(())
    }
}

fn family_token(f: FrameFamily) -> &'static str {
    match f {
        FrameFamily::Pixel => "pixel",
        FrameFamily::GaussianDerivative => "gauss",
        FrameFamily::Framelet => "framelet",
        FrameFamily::Naive => "naive",
        FrameFamily::Custom => "custom",
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.kind.name(), self.width)?;
        let attrs = self.attributes();
        if !attrs.is_empty() {
            let body: Vec<String> = attrs.iter().map(|(k, v)| format!("{k}={v}")).collect();
            write!(f, "{{{}}}", body.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Canonical text form.
    pub fn serialize(&self) -> String {
        self.to_string()
    }

    /// Parameters-free structural check: positive widths.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network spec has no layers".into()));
        }
        for l in &self.layers {
            if l.width == 0 || l.hidden == 0 {
                return Err(Error::Config(format!("{l} has a zero width")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.layers.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("->"))
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_network_spec(s)
    }
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> (usize, &'a str) {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if !pred(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
        (start, &self.src[start..self.pos])
    }

    fn error(&self, position: usize, token: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            position,
            token: token.to_string(),
            message: message.into(),
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        self.skip_ws();
        match self.peek() {
            Some(got) if got == c => {
                self.pos += c.len_utf8();
                Ok(())
            }
            Some(got) => Err(self.error(self.pos, &got.to_string(), format!("expected '{c}'"))),
            None => Err(self.error(self.pos, "", format!("expected '{c}' before end of input"))),
        }
    }
}

/// Parses the architecture grammar described in the module docs.
pub fn parse_network_spec(text: &str) -> Result<NetworkSpec> {
    let mut cur = Cursor { src: text, pos: 0 };
    let mut layers = Vec::new();
    loop {
        cur.skip_ws();
        let (start, name) = cur.take_while(|c| c.is_ascii_alphanumeric() || c == '_');
        if name.is_empty() {
            let tok = cur.peek().map(|c| c.to_string()).unwrap_or_default();
            return Err(cur.error(start, &tok, "expected a layer name"));
        }
        let kind = LayerKind::parse(name).ok_or_else(|| {
            cur.error(
                start,
                name,
                "unknown layer name (expected Conv2d, DynResBlock or StatResBlock)",
            )
        })?;
        cur.expect('[')?;
        cur.skip_ws();
        let (wpos, wtext) = cur.take_while(|c| c != ']' && c != '-' && !c.is_whitespace());
        let width = wtext
            .parse::<usize>()
            .ok()
            .filter(|w| *w > 0)
            .ok_or_else(|| cur.error(wpos, wtext, "width must be a positive integer"))?;
        cur.expect(']')?;
        let mut layer = LayerSpec::new(kind, width);
        cur.skip_ws();
        if cur.peek() == Some('{') {
            cur.pos += 1;
            loop {
                cur.skip_ws();
                let (kpos, key) = cur.take_while(|c| c.is_ascii_alphanumeric() || c == '_');
                if key.is_empty() {
                    let tok = cur.peek().map(|c| c.to_string()).unwrap_or_default();
                    return Err(cur.error(kpos, &tok, "expected an attribute name"));
                }
                cur.expect('=')?;
                cur.skip_ws();
                let (vpos, value) =
                    cur.take_while(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-');
                layer
                    .set_attribute(&key.to_ascii_lowercase(), &value.to_ascii_lowercase())
                    .map_err(|m| cur.error(if m.starts_with("unknown attribute") { kpos } else { vpos }, if m.starts_with("unknown attribute") { key } else { value }, m))?;
                cur.skip_ws();
                match cur.peek() {
                    Some(',') => cur.pos += 1,
                    Some('}') => {
                        cur.pos += 1;
                        break;
                    }
                    other => {
                        let tok = other.map(|c| c.to_string()).unwrap_or_default();
                        return Err(cur.error(cur.pos, &tok, "expected ',' or '}'"));
                    }
                }
            }
        }
        layers.push(layer);
        cur.skip_ws();
        if cur.pos == text.len() {
            break;
        }
        if text[cur.pos..].starts_with("->") {
            cur.pos += 2;
        } else {
            let tok: String = text[cur.pos..].chars().take(8).collect();
            return Err(cur.error(cur.pos, &tok, "expected '->' between layers"));
        }
    }
    Ok(NetworkSpec { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ARCH: &str = "Conv2d[64]->DynResBlock[128]->StatResBlock[128]->DynResBlock[128]->StatResBlock[128]->Conv2D[256]";

    #[test]
    fn parses_reference_architecture() {
        let spec = parse_network_spec(ARCH).unwrap();
        assert_eq!(spec.layers.len(), 6);
        let kinds: Vec<_> = spec.layers.iter().map(|l| (l.kind, l.width)).collect();
        assert_eq!(kinds[0], (LayerKind::Conv2d, 64));
        assert_eq!(kinds[1], (LayerKind::DynResBlock, 128));
        assert_eq!(kinds[5], (LayerKind::Conv2d, 256));
        assert_eq!(spec.serialize(), ARCH.replace("Conv2D", "Conv2d"));
    }

    #[test]
    fn single_layer_and_errors() {
        assert_eq!(parse_network_spec("Conv2d[8]").unwrap().layers.len(), 1);
        match parse_network_spec("Foo[3]") {
            Err(Error::Parse { token, position, .. }) => {
                assert_eq!(token, "Foo");
                assert_eq!(position, 0);
            }
            other => panic!("{other:?}"),
        }
        match parse_network_spec("Conv2d[8]->StatResBlock[x1]") {
            Err(Error::Parse { token, position, .. }) => {
                assert_eq!(token, "x1");
                assert_eq!(position, 24);
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_network_spec("Conv2d[0]").is_err());
        assert!(parse_network_spec("Conv2d[8]->").is_err());
        assert!(parse_network_spec("Conv2d[8] Conv2d[8]").is_err());
        assert!(parse_network_spec("Conv2d[8]{pose=block}").is_err());
        assert!(parse_network_spec("DynResBlock[8]{steer=maybe}").is_err());
    }

    #[test]
    fn attributes_round_trip() {
        let text = "Conv2d[4]{frame=pixel}->DynResBlock[8]{pose=block,steer=free,hidden=8}";
        let spec = parse_network_spec(text).unwrap();
        assert_eq!(spec.layers[1].pose, PoseGranularity::PerBlock);
        assert_eq!(spec.layers[1].steering, SteeringMode::Free);
        assert_eq!(spec.serialize(), text);
        let loose = "  conv2d[4] { frame = pixel } -> dynresblock[8]{hidden=16, pose=channel}";
        assert_eq!(parse_network_spec(loose).unwrap().serialize(), "Conv2d[4]{frame=pixel}->DynResBlock[8]");
    }

    fn layer_strategy() -> impl Strategy<Value = LayerSpec> {
        (0usize..3, 1usize..300, 0usize..4, prop::bool::ANY, prop::bool::ANY, 1usize..20).prop_map(
            |(k, width, fam, block, free, hidden)| {
                let kind = [LayerKind::Conv2d, LayerKind::DynResBlock, LayerKind::StatResBlock][k];
                let mut l = LayerSpec::new(kind, width);
                l.frame.family = [
                    FrameFamily::Pixel,
                    FrameFamily::GaussianDerivative,
                    FrameFamily::Framelet,
                    FrameFamily::Naive,
                ][fam];
                if kind == LayerKind::DynResBlock {
                    l.pose = if block { PoseGranularity::PerBlock } else { PoseGranularity::PerOutputChannel };
                    l.steering = if free { SteeringMode::Free } else { SteeringMode::Analytic };
                    l.hidden = hidden;
                }
                l
            },
        )
    }

    proptest! {
        #[test]
        fn serialize_parse_is_identity(layers in prop::collection::vec(layer_strategy(), 1..6)) {
            let spec = NetworkSpec { layers };
            let text = spec.serialize();
            let back = parse_network_spec(&text).unwrap();
            prop_assert_eq!(back.serialize(), text);
        }
    }
}
