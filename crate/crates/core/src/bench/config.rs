//! Benchmark configurations: shapes, variants and the key=value file format.

use std::fmt;
use std::str::FromStr;

use crate::binconv::ConvSpec;
use crate::error::{BitflowError, Result};
use crate::tensor::{KernelDims, Nhwc};

pub const MIN_REPEATS: usize = 5;

/// One convolution layer, batch 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub filter: usize,
    pub stride: usize,
    pub pad: usize,
}

impl LayerShape {
    /// Square input, square filter, "same" padding.
    pub const fn square(
        size: usize,
        in_channels: usize,
        out_channels: usize,
        filter: usize,
        stride: usize,
    ) -> Self {
        Self {
            height: size,
            width: size,
            in_channels,
            out_channels,
            filter,
            stride,
            pad: filter / 2,
        }
    }

    pub fn input_dims(&self) -> Nhwc {
        Nhwc::new(1, self.height, self.width, self.in_channels)
    }

    pub fn kernel_dims(&self) -> KernelDims {
        KernelDims::new(
            self.out_channels,
            self.filter,
            self.filter,
            self.in_channels,
        )
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec::new((self.stride, self.stride), (self.pad, self.pad))
    }

    pub fn validate(&self) -> Result<()> {
        self.input_dims().validate()?;
        self.kernel_dims().validate()?;
        self.spec()
            .output_dims(self.input_dims(), self.kernel_dims())?;
        Ok(())
    }

    /// `HxWxC-O-kFsS`, plus `pP` when padding is not "same".
    pub fn default_id(&self) -> String {
        let mut id = format!(
            "{}x{}x{}-{}-k{}s{}",
            self.height, self.width, self.in_channels, self.out_channels, self.filter, self.stride
        );
        if self.pad != self.filter / 2 {
            id.push_str(&format!("p{}", self.pad));
        }
        id
    }
}

/// Engine path under measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Threshold, pack, pad and convolve per tile; 8-bit output.
    I8Fused,
    /// Threshold and pack the whole map, pad it, then a 32-bit convolution.
    I32Staged,
    /// Dense `±1` convolution over unpacked integers.
    FloatReference,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::I8Fused,
        Variant::I32Staged,
        Variant::FloatReference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::I8Fused => "i8-fused",
            Variant::I32Staged => "i32-staged",
            Variant::FloatReference => "float-reference",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = BitflowError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim())
            .ok_or_else(|| {
                BitflowError::Config(format!(
                    "unknown variant {s:?} (i8-fused | i32-staged | float-reference)"
                ))
            })
    }
}

/// Parse a comma-separated, duplicate-free variant list.
pub fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    let mut out: Vec<Variant> = Vec::new();
    for part in s.split(',') {
        let v: Variant = part.parse()?;
        if out.contains(&v) {
            return Err(BitflowError::Config(format!("variant {v} listed twice")));
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchConfig {
    pub id: String,
    pub shape: LayerShape,
    pub variants: Vec<Variant>,
    pub repeats: usize,
    pub warmup: usize,
    /// Worker threads for the timed kernels; 0 lets the pool pick.
    pub threads: usize,
}

impl BenchConfig {
    pub fn new(shape: LayerShape) -> Self {
        Self {
            id: shape.default_id(),
            shape,
            variants: vec![Variant::I8Fused, Variant::I32Staged],
            repeats: 15,
            warmup: 3,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.variants.is_empty() {
            return Err(BitflowError::Config(format!("{}: no variants", self.id)));
        }
        if self.repeats < MIN_REPEATS {
            return Err(BitflowError::Config(format!(
                "{}: repeats must be at least {MIN_REPEATS}, got {}",
                self.id, self.repeats
            )));
        }
        if self.id.is_empty() || self.id.contains([',', '\n', '"']) {
            return Err(BitflowError::Config(format!(
                "invalid config id {:?}",
                self.id
            )));
        }
        Ok(())
    }
}

/// Command-line values that replace the file values of every config.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BenchOverrides {
    pub variants: Option<Vec<Variant>>,
    pub repeats: Option<usize>,
    pub warmup: Option<usize>,
    pub threads: Option<usize>,
}

impl BenchOverrides {
    pub fn apply(&self, c: &mut BenchConfig) {
        if let Some(v) = &self.variants {
            c.variants = v.clone();
        }
        if let Some(r) = self.repeats {
            c.repeats = r;
        }
        if let Some(w) = self.warmup {
            c.warmup = w;
        }
        if let Some(t) = self.threads {
            c.threads = t;
        }
    }
}

/// Nine 3x3 layers shaped like a ResNet-18 body.
///
/// Each stage contributes its stride-1 layer and, from the second stage on,
/// its stride-2 entry layer. Two extra stride-1 layers at 28 and 14 pixels
/// keep the channel count of the previous stage, so every channel width is
/// measured at two resolutions.
pub fn default_suite() -> Vec<BenchConfig> {
    [
        LayerShape::square(56, 64, 64, 3, 1),
        LayerShape::square(56, 64, 128, 3, 2),
        LayerShape::square(28, 64, 64, 3, 1),
        LayerShape::square(28, 128, 128, 3, 1),
        LayerShape::square(28, 128, 256, 3, 2),
        LayerShape::square(14, 128, 128, 3, 1),
        LayerShape::square(14, 256, 256, 3, 1),
        LayerShape::square(14, 256, 512, 3, 2),
        LayerShape::square(7, 512, 512, 3, 1),
    ]
    .into_iter()
    .map(BenchConfig::new)
    .collect()
}

/// Parse `key = value` stanzas separated by blank lines. `#` starts a comment.
///
/// Keys: `id`, `h`, `w`, `c_in`, `c_out`, `filter`, `stride`, `pad`,
/// `variants`, `repeats`, `warmup`, `threads`. `h`, `w` and `c_in` are
/// required; `c_out` defaults to `c_in`, `filter` to 3, `stride` to 1 and
/// `pad` to `filter / 2`.
pub fn parse_configs(text: &str) -> Result<Vec<BenchConfig>> {
    let mut out = Vec::new();
    let mut stanza: Vec<(usize, &str, &str)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            if raw.trim().is_empty() && !stanza.is_empty() {
                out.push(parse_stanza(&stanza)?);
                stanza.clear();
            }
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| BitflowError::Config(format!("line {}: expected key = value", n + 1)))?;
        stanza.push((n + 1, k.trim(), v.trim()));
    }
    if !stanza.is_empty() {
        out.push(parse_stanza(&stanza)?);
    }
    if out.is_empty() {
        return Err(BitflowError::Config("config file has no stanzas".into()));
    }
    Ok(out)
}

fn parse_stanza(lines: &[(usize, &str, &str)]) -> Result<BenchConfig> {
    const KEYS: [&str; 12] = [
        "id", "h", "w", "c_in", "c_out", "filter", "stride", "pad", "variants", "repeats",
        "warmup", "threads",
    ];
    let mut seen: Vec<&str> = Vec::new();
    for &(n, k, _) in lines {
        if !KEYS.contains(&k) {
            return Err(BitflowError::Config(format!("line {n}: unknown key {k:?}")));
        }
        if seen.contains(&k) {
            return Err(BitflowError::Config(format!(
                "line {n}: duplicate key {k:?}"
            )));
        }
        seen.push(k);
    }
    let get = |key: &str| {
        lines
            .iter()
            .find(|(_, k, _)| *k == key)
            .map(|&(n, _, v)| (n, v))
    };
    let num = |key: &str| -> Result<Option<usize>> {
        get(key)
            .map(|(n, v)| {
                v.parse::<usize>().map_err(|_| {
                    BitflowError::Config(format!("line {n}: {key} must be a non-negative integer"))
                })
            })
            .transpose()
    };
    let first = lines[0].0;
    let need = |key: &str| -> Result<usize> {
        num(key)?
            .ok_or_else(|| BitflowError::Config(format!("stanza at line {first}: missing {key}")))
    };
    let c_in = need("c_in")?;
    let filter = num("filter")?.unwrap_or(3);
    let shape = LayerShape {
        height: need("h")?,
        width: need("w")?,
        in_channels: c_in,
        out_channels: num("c_out")?.unwrap_or(c_in),
        filter,
        stride: num("stride")?.unwrap_or(1),
        pad: num("pad")?.unwrap_or(filter / 2),
    };
    let mut c = BenchConfig::new(shape);
    if let Some((_, id)) = get("id") {
        c.id = id.to_string();
    }
    if let Some((_, v)) = get("variants") {
        c.variants = parse_variants(v)?;
    }
    c.repeats = num("repeats")?.unwrap_or(c.repeats);
    c.warmup = num("warmup")?.unwrap_or(c.warmup);
    c.threads = num("threads")?.unwrap_or(c.threads);
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stanzas_with_defaults_and_comments() {
        let text = "# suite\nid = a\nh = 14\nw = 14\nc_in = 256\n\n\nh=7 # tail\nw=7\nc_in=64\nc_out=32\nfilter=5\nstride=2\nvariants=i32-staged\nrepeats=7\nwarmup=0\nthreads=2\n";
        let cs = parse_configs(text).unwrap();
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0].id, "a");
        assert_eq!(cs[0].shape, LayerShape::square(14, 256, 256, 3, 1));
        assert_eq!(cs[0].variants, vec![Variant::I8Fused, Variant::I32Staged]);
        let b = &cs[1];
        assert_eq!(b.id, "7x7x64-32-k5s2");
        assert_eq!(b.shape.pad, 2);
        assert_eq!(b.variants, vec![Variant::I32Staged]);
        assert_eq!((b.repeats, b.warmup, b.threads), (7, 0, 2));
    }

    #[test]
    fn comment_lines_do_not_split_stanzas() {
        let cs = parse_configs("h = 8\n# note\nw = 8\nc_in = 3\n").unwrap();
        assert_eq!(cs.len(), 1);
    }

    #[test]
    fn malformed_files_are_rejected() {
        for bad in [
            "",
            "h = 8\nw = 8\n",
            "h = 8\nw = 8\nc_in = 3\nsize = 2\n",
            "h = 8\nh = 9\nw = 8\nc_in = 3\n",
            "h = -8\nw = 8\nc_in = 3\n",
            "h 8\n",
            "h = 8\nw = 8\nc_in = 3\nvariants = i8-fused,gpu\n",
            "h = 8\nw = 8\nc_in = 3\nvariants = i8-fused,i8-fused\n",
        ] {
            assert!(
                matches!(parse_configs(bad), Err(BitflowError::Config(_))),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut c = parse_configs("h=8\nw=8\nc_in=3\nrepeats=9\nthreads=4\n")
            .unwrap()
            .remove(0);
        BenchOverrides {
            repeats: Some(5),
            variants: Some(vec![Variant::FloatReference]),
            ..Default::default()
        }
        .apply(&mut c);
        assert_eq!((c.repeats, c.threads), (5, 4));
        assert_eq!(c.variants, vec![Variant::FloatReference]);
    }

    #[test]
    fn validation_limits() {
        let mut c = BenchConfig::new(LayerShape::square(8, 3, 4, 3, 1));
        c.validate().unwrap();
        c.repeats = 4;
        assert!(c.validate().is_err());
        let mut c = BenchConfig::new(LayerShape::square(2, 3, 4, 5, 1));
        c.shape.pad = 0;
        assert!(matches!(c.validate(), Err(BitflowError::EmptyOutput)));
    }

    #[test]
    fn default_suite_shapes() {
        let s = default_suite();
        assert_eq!(s.len(), 9);
        for c in &s {
            c.validate().unwrap();
            assert_eq!(c.shape.filter, 3);
            assert!([56, 28, 14, 7].contains(&c.shape.height));
            assert!([64, 128, 256, 512].contains(&c.shape.in_channels));
        }
        let mut ids: Vec<_> = s.iter().map(|c| c.id.clone()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 9);
    }
}
