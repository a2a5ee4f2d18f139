//! Block and network descriptions plus their line-oriented text form.
//!
//! ```text
//! # comments and blank lines are ignored
//! name dy-tiny-mobile
//! input 3 32 32
//! classes 10
//! stem out=12 kernel=3 stride=2
//! block kind=dy-mobile in=12 out=12 stride=1 gt=6
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Mobile,
    Shuffle,
    ResNetBasic,
    ResNetBottleneck,
}

/// Dynamic block, its equal-width fixed-kernel control, or the unreduced
/// original architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Dynamic,
    Fixed,
    Original,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockKind {
    pub family: Family,
    pub variant: Variant,
}

const KIND_NAMES: [(&str, Family, Variant); 12] = [
    ("dy-mobile", Family::Mobile, Variant::Dynamic),
    ("fix-mobile", Family::Mobile, Variant::Fixed),
    ("mobilenet-v2", Family::Mobile, Variant::Original),
    ("dy-shuffle", Family::Shuffle, Variant::Dynamic),
    ("fix-shuffle", Family::Shuffle, Variant::Fixed),
    ("shufflenet-v2", Family::Shuffle, Variant::Original),
    ("dy-resnet-basic", Family::ResNetBasic, Variant::Dynamic),
    ("fix-resnet-basic", Family::ResNetBasic, Variant::Fixed),
    ("resnet-basic", Family::ResNetBasic, Variant::Original),
    ("dy-resnet-bottleneck", Family::ResNetBottleneck, Variant::Dynamic),
    ("fix-resnet-bottleneck", Family::ResNetBottleneck, Variant::Fixed),
    ("resnet-bottleneck", Family::ResNetBottleneck, Variant::Original),
];

impl BlockKind {
    pub const fn new(family: Family, variant: Variant) -> Self {
        Self { family, variant }
    }

    pub fn name(&self) -> &'static str {
        KIND_NAMES
            .iter()
            .find(|(_, f, v)| (*f, *v) == (self.family, self.variant))
            .map(|(n, _, _)| *n)
            .expect("every family/variant pair is named")
    }

    pub fn is_dynamic(&self) -> bool {
        self.variant == Variant::Dynamic
    }

    /// Same family, different variant.
    pub fn with_variant(self, variant: Variant) -> Self {
        Self { variant, ..self }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KIND_NAMES
            .iter()
            .find(|(n, _, _)| *n == s)
            .map(|&(_, family, variant)| Self { family, variant })
            .ok_or_else(|| {
                let names: Vec<_> = KIND_NAMES.iter().map(|(n, _, _)| *n).collect();
                Error::invalid(format!("unknown block kind {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

pub const DEFAULT_GROUP_SIZE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Bank size per output channel; only meaningful for dynamic blocks.
    pub group_size: usize,
}

impl BlockSpec {
    /// Validates the stride and, for the mobile dynamic block and its fixed
    /// control, rounds `out_channels` up to a multiple of 6.
    pub fn new(
        kind: BlockKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        group_size: usize,
    ) -> Result<Self> {
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(format!("stride must be 1 or 2, got {stride}")));
        }
        if in_channels == 0 || out_channels == 0 || group_size == 0 {
            return Err(Error::invalid("channel counts and g_t must be positive"));
        }
        let out_channels = if kind.family == Family::Mobile && kind.variant != Variant::Original {
            out_channels.div_ceil(6) * 6
        } else {
            out_channels
        };
        let group_size = if kind.is_dynamic() { group_size } else { 1 };
        Ok(Self {
            kind,
            in_channels,
            out_channels,
            stride,
            group_size,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    /// `(C, H, W)` of one input image.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
}

impl NetworkSpec {
    /// Checks channel chaining from stem through every block.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 || self.classes == 0 {
            return Err(Error::invalid("input extents and class count must be positive"));
        }
        if self.stem.out_channels == 0 || self.stem.kernel_size == 0 || self.stem.stride == 0 {
            return Err(Error::invalid("stem parameters must be positive"));
        }
        let mut prev = self.stem.out_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != prev {
                return Err(Error::invalid(format!(
                    "block {i} expects {} input channels but receives {prev}",
                    b.in_channels
                )));
            }
            prev = b.out_channels;
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks
            .last()
            .map_or(self.stem.out_channels, |b| b.out_channels)
    }

    /// Same spec with every block switched to `variant`.
    pub fn with_variant(&self, variant: Variant, name: &str) -> Result<Self> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                BlockSpec::new(
                    b.kind.with_variant(variant),
                    b.in_channels,
                    b.out_channels,
                    b.stride,
                    b.group_size,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            blocks,
            ..self.clone()
        })
    }

    /// Same spec with every dynamic block using bank size `group_size`.
    pub fn with_group_size(&self, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::invalid("g_t must be positive"));
        }
        let mut out = self.clone();
        for b in &mut out.blocks {
            if b.kind.is_dynamic() {
                b.group_size = group_size;
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let (c, h, w) = self.input;
        let mut s = format!(
            "name {}\ninput {c} {h} {w}\nclasses {}\nstem out={} kernel={} stride={}\n",
            self.name, self.classes, self.stem.out_channels, self.stem.kernel_size, self.stem.stride
        );
        for b in &self.blocks {
            s.push_str(&format!(
                "block kind={} in={} out={} stride={} gt={}\n",
                b.kind, b.in_channels, b.out_channels, b.stride, b.group_size
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut name = None;
        let mut input = None;
        let mut classes = None;
        let mut stem = None;
        let mut blocks = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| Error::Spec {
                line: line_no,
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            let mut words = line.split_whitespace();
            let Some(head) = words.next() else { continue };
            let rest: Vec<&str> = words.collect();
            match head {
                "name" => {
                    if rest.len() != 1 {
                        return Err(err("name takes exactly one word".into()));
                    }
                    name = Some(rest[0].to_string());
                }
                "input" => {
                    let v = rest
                        .iter()
                        .map(|w| w.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| err(format!("bad input extent: {e}")))?;
                    let [c, h, w] = v[..] else {
                        return Err(err("input takes C H W".into()));
                    };
                    input = Some((c, h, w));
                }
                "classes" => {
                    let [v] = rest[..] else {
                        return Err(err("classes takes one number".into()));
                    };
                    classes = Some(v.parse().map_err(|e| err(format!("bad class count: {e}")))?);
                }
                "stem" => {
                    let kv = KeyValues::parse(&rest).map_err(err)?;
                    stem = Some(StemSpec {
                        out_channels: kv.usize("out").map_err(err)?,
                        kernel_size: kv.usize_or("kernel", 3).map_err(err)?,
                        stride: kv.usize_or("stride", 1).map_err(err)?,
                    });
                    kv.finish(&["out", "kernel", "stride"]).map_err(err)?;
                }
                "block" => {
                    let kv = KeyValues::parse(&rest).map_err(err)?;
                    let kind: BlockKind = kv
                        .get("kind")
                        .ok_or_else(|| err("block needs kind=".into()))?
                        .parse()
                        .map_err(|e: Error| err(e.to_string()))?;
                    let spec = BlockSpec::new(
                        kind,
                        kv.usize("in").map_err(err)?,
                        kv.usize("out").map_err(err)?,
                        kv.usize_or("stride", 1).map_err(err)?,
                        kv.usize_or("gt", DEFAULT_GROUP_SIZE).map_err(err)?,
                    )
                    .map_err(|e| err(e.to_string()))?;
                    kv.finish(&["kind", "in", "out", "stride", "gt"]).map_err(err)?;
                    blocks.push(spec);
                }
                other => return Err(err(format!("unknown directive {other:?}"))),
            }
        }
        let last = text.lines().count().max(1);
        let missing = |what: &str| Error::Spec {
            line: last,
            message: format!("missing {what} line"),
        };
        let spec = Self {
            name: name.unwrap_or_else(|| "unnamed".into()),
            input: input.ok_or_else(|| missing("input"))?,
            classes: classes.ok_or_else(|| missing("classes"))?,
            stem: stem.ok_or_else(|| missing("stem"))?,
            blocks,
        };
        spec.validate()?;
        Ok(spec)
    }
}

struct KeyValues<'a> {
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> KeyValues<'a> {
    fn parse(words: &[&'a str]) -> Result<Self, String> {
        let pairs = words
            .iter()
            .map(|w| w.split_once('=').ok_or_else(|| format!("expected key=value, got {w:?}")))
            .collect::<Result<_, _>>()?;
        Ok(Self { pairs })
    }

    fn get(&self, key: &str) -> Option<&'a str> {
        self.pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn usize(&self, key: &str) -> Result<usize, String> {
        let v = self.get(key).ok_or_else(|| format!("missing {key}="))?;
        v.parse().map_err(|_| format!("{key}={v} is not a non-negative integer"))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, String> {
        match self.get(key) {
            Some(_) => self.usize(key),
            None => Ok(default),
        }
    }

    fn finish(&self, known: &[&str]) -> Result<(), String> {
        match self.pairs.iter().find(|(k, _)| !known.contains(k)) {
            Some((k, _)) => Err(format!("unknown key {k:?}")),
            None => Ok(()),
        }
    }
}

/// Stem and block plan of the small reference networks.
const TINY_PLAN: [(usize, usize, usize); 4] = [(12, 12, 1), (12, 24, 2), (24, 24, 1), (24, 48, 2)];

/// Four mobile blocks on 32x32 inputs with ten classes. `Variant::Dynamic`
/// gives Dy-tiny-mobile, `Variant::Fixed` the equal-width Fix-tiny-mobile.
pub fn tiny_mobile(variant: Variant, group_size: usize) -> Result<NetworkSpec> {
    let kind = BlockKind::new(Family::Mobile, variant);
    let blocks = TINY_PLAN
        .iter()
        .map(|&(i, o, s)| BlockSpec::new(kind, i, o, s, group_size))
        .collect::<Result<_>>()?;
    let name = match variant {
        Variant::Dynamic => "dy-tiny-mobile",
        Variant::Fixed => "fix-tiny-mobile",
        Variant::Original => "tiny-mobilenet-v2",
    };
    Ok(NetworkSpec {
        name: name.into(),
        input: (3, 32, 32),
        classes: 10,
        stem: StemSpec {
            out_channels: TINY_PLAN[0].0,
            kernel_size: 3,
            stride: 2,
        },
        blocks,
    })
}

/// Built-in specs addressable by name from the command line.
pub fn builtin(name: &str) -> Option<NetworkSpec> {
    match name {
        "dy-tiny-mobile" => tiny_mobile(Variant::Dynamic, DEFAULT_GROUP_SIZE).ok(),
        "fix-tiny-mobile" => tiny_mobile(Variant::Fixed, 1).ok(),
        "tiny-mobilenet-v2" => tiny_mobile(Variant::Original, 1).ok(),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for (name, family, variant) in KIND_NAMES {
            let k: BlockKind = name.parse().unwrap();
            assert_eq!(k, BlockKind::new(family, variant));
            assert_eq!(k.name(), name);
        }
        assert!("dy-mobilenet".parse::<BlockKind>().is_err());
    }

    #[test]
    fn mobile_output_rounds_up_to_six() {
        let k = BlockKind::new(Family::Mobile, Variant::Dynamic);
        assert_eq!(BlockSpec::new(k, 16, 32, 1, 6).unwrap().out_channels, 36);
        assert_eq!(BlockSpec::new(k, 16, 48, 1, 6).unwrap().out_channels, 48);
        let orig = k.with_variant(Variant::Original);
        assert_eq!(BlockSpec::new(orig, 16, 32, 1, 6).unwrap().out_channels, 32);
        assert!(BlockSpec::new(k, 16, 32, 3, 6).is_err());
    }

    #[test]
    fn text_round_trip() {
        let spec = tiny_mobile(Variant::Dynamic, 6).unwrap();
        let back = NetworkSpec::parse(&spec.to_text()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "name x\ninput 3 8 8\nclasses 2\nstem out=6\nblock kind=dy-mobile in=7 out=6\n";
        assert!(matches!(NetworkSpec::parse(text), Err(Error::InvalidArgument(_))));
        let text = "name x\ninput 3 8\n";
        assert!(matches!(NetworkSpec::parse(text), Err(Error::Spec { line: 2, .. })));
        let text = "name x\ninput 3 8 8\nclasses 2\nstem out=6 colour=red\n";
        assert!(matches!(NetworkSpec::parse(text), Err(Error::Spec { line: 4, .. })));
    }
}
