use std::fmt::Write as _;
use std::path::Path;

use crate::affiner::{LayerShape, ParamCountModel};
use crate::error::{Error, Result};
use crate::nn::LayerRole;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Dit,
    Cnn,
}

/// Architecture description, readable from a `key = value` text file.
///
/// For the CNN, `hidden` is the base channel width and the conditioning
/// embedding size; `depth`, `heads` and `patch` are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub kind: ArchKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Base class count `N`; the unconditional row is added on top.
    pub classes: usize,
    pub freq_dim: usize,
    /// Channels of an optional condition map.
    pub cond_channels: usize,
}

impl ArchConfig {
    /// 32×32 RGB transformer: hidden 128, depth 6, 4 heads, patch 4.
    pub fn dit_toy() -> Self {
        Self {
            kind: ArchKind::Dit,
            height: 32,
            width: 32,
            channels: 3,
            patch: 4,
            hidden: 128,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            classes: 4,
            freq_dim: 128,
            cond_channels: 1,
        }
    }

    /// DiT-XL/2 on 32×32×4 latents with 1000 classes.
    pub fn dit_xl() -> Self {
        Self {
            kind: ArchKind::Dit,
            height: 32,
            width: 32,
            channels: 4,
            patch: 2,
            hidden: 1152,
            depth: 28,
            heads: 16,
            mlp_ratio: 4,
            classes: 1000,
            freq_dim: 256,
            cond_channels: 0,
        }
    }

    /// Sets of 8 two-dimensional points, one point per token.
    pub fn point_set() -> Self {
        Self {
            kind: ArchKind::Dit,
            height: 1,
            width: 8,
            channels: 2,
            patch: 1,
            hidden: 160,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            classes: 0,
            freq_dim: 64,
            cond_channels: 0,
        }
    }

    /// Small UNet over 16×16 images.
    pub fn cnn_toy() -> Self {
        Self {
            kind: ArchKind::Cnn,
            height: 16,
            width: 16,
            channels: 3,
            patch: 1,
            hidden: 32,
            depth: 1,
            heads: 1,
            mlp_ratio: 1,
            classes: 4,
            freq_dim: 64,
            cond_channels: 1,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch.max(1)) * (self.width / self.patch.max(1))
    }

    /// `round(hidden / 18)`, at least 1.
    pub fn default_rank(&self) -> usize {
        ((self.hidden as f64 / 18.0).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if [self.height, self.width, self.channels, self.hidden, self.freq_dim].contains(&0)
        {
            return bad("image dims, hidden and freq_dim must be positive".into());
        }
        if self.freq_dim < 2 {
            return bad("freq_dim must be at least 2".into());
        }
        match self.kind {
            ArchKind::Dit => {
                if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
                    return bad(format!("patch {} does not tile {}x{}", self.patch, self.height, self.width));
                }
                if self.depth == 0 || self.mlp_ratio == 0 {
                    return bad("depth and mlp_ratio must be positive".into());
                }
                if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
                    return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
                }
            }
            ArchKind::Cnn => {
                if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
                    return bad("the CNN needs even image sides".into());
                }
            }
        }
        Ok(())
    }

    /// Shapes of every wrapped layer and the frozen total, computed without allocating weights.
    pub fn count_model(&self) -> ParamCountModel {
        let h = self.hidden;
        let mut layers = Vec::new();
        let mut push = |id: String, m: usize, n: usize, role: LayerRole| layers.push(LayerShape { id, m, n, role });
        let mut total = 0usize;
        let lin = |m: usize, k: usize| m * k + m;
        match self.kind {
            ArchKind::Dit => {
                let p2c = self.patch * self.patch * self.channels;
                let mlp = h * self.mlp_ratio;
                total += lin(h, p2c) + lin(h, self.freq_dim) + lin(h, h) + (self.classes + 1) * h;
                for i in 0..self.depth {
                    let pre = format!("blocks.{i}");
                    for name in ["q", "k", "v", "out"] {
                        push(format!("{pre}.attn.{name}"), h, h, LayerRole::Attention);
                        total += lin(h, h);
                    }
                    push(format!("{pre}.mlp.fc1"), mlp, h, LayerRole::Mlp);
                    push(format!("{pre}.mlp.fc2"), h, mlp, LayerRole::Mlp);
                    push(format!("{pre}.adaln"), 6 * h, h, LayerRole::Modulation);
                    total += lin(mlp, h) + lin(h, mlp) + lin(6 * h, h);
                }
                total += lin(2 * h, h) + lin(p2c, h);
            }
            ArchKind::Cnn => {
                let (c0, c1) = (h, 2 * h);
                total += lin(c0, 9 * self.channels) + lin(h, self.freq_dim) + lin(h, h) + (self.classes + 1) * h;
                for (id, cin, cout) in super::cnn::RES_BLOCKS.iter().map(|&(id, i, o)| (id, i.width(c0, c1), o.width(c0, c1))) {
                    push(format!("{id}.conv1"), cout, cin, LayerRole::Conv);
                    push(format!("{id}.cond"), 2 * cout, h, LayerRole::Modulation);
                    push(format!("{id}.conv2"), cout, cout, LayerRole::Conv);
                    total += lin(cout, 9 * cin) + lin(2 * cout, h) + lin(cout, 9 * cout);
                    if cin != cout {
                        push(format!("{id}.skip"), cout, cin, LayerRole::Projection);
                        total += lin(cout, cin);
                    }
                }
                total += lin(self.channels, 9 * c0);
            }
        }
        ParamCountModel {
            layers,
            backbone_total: total,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kind = match self.kind {
            ArchKind::Dit => "dit",
            ArchKind::Cnn => "cnn",
        };
        let _ = writeln!(s, "kind = {kind}");
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "tokens = {}", self.tokens());
        s
    }

    fn fields(&self) -> [(&'static str, usize); 11] {
        [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("hidden", self.hidden),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.classes),
            ("freq_dim", self.freq_dim),
            ("cond_channels", self.cond_channels),
        ]
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys take the
    /// `dit_toy` (or `cnn_toy`) defaults; `preset = dit_xl | dit_toy | point_set | cnn_toy` seeds them.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(err(i + 1, format!("expected `key = value`, got `{line}`")));
            };
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }

        let mut cfg = Self::dit_toy();
        for (line, k, v) in &pairs {
            match k.as_str() {
                "preset" => {
                    cfg = match v.as_str() {
                        "dit_toy" => Self::dit_toy(),
                        "dit_xl" => Self::dit_xl(),
                        "point_set" => Self::point_set(),
                        "cnn_toy" => Self::cnn_toy(),
                        other => return Err(err(*line, format!("unknown preset `{other}`"))),
                    }
                }
                "kind" if v == "cnn" && cfg.kind != ArchKind::Cnn => cfg = Self::cnn_toy(),
                _ => {}
            }
        }
        let mut tokens = None;
        for (line, k, v) in pairs {
            let num = || -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| err(line, format!("`{k}` expects a non-negative integer, got `{v}`")))
            };
            match k.as_str() {
                "preset" => {}
                "kind" => {
                    cfg.kind = match v.as_str() {
                        "dit" => ArchKind::Dit,
                        "cnn" => ArchKind::Cnn,
                        other => return Err(err(line, format!("unknown kind `{other}`"))),
                    }
                }
                "height" => cfg.height = num()?,
                "width" => cfg.width = num()?,
                "channels" => cfg.channels = num()?,
                "patch" => cfg.patch = num()?,
                "hidden" => cfg.hidden = num()?,
                "depth" => cfg.depth = num()?,
                "heads" => cfg.heads = num()?,
                "mlp_ratio" => cfg.mlp_ratio = num()?,
                "classes" => cfg.classes = num()?,
                "freq_dim" => cfg.freq_dim = num()?,
                "cond_channels" => cfg.cond_channels = num()?,
                "tokens" => tokens = Some((line, num()?)),
                other => return Err(err(line, format!("unknown key `{other}`"))),
            }
        }
        let last = text.lines().count().max(1);
        cfg.validate().map_err(|e| err(last, e.to_string()))?;
        if let Some((line, t)) = tokens {
            if cfg.kind == ArchKind::Dit && t != cfg.tokens() {
                return Err(err(line, format!("tokens = {t} but the patch grid has {}", cfg.tokens())));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ArchConfig> {
        ArchConfig::parse(text, Path::new("arch.txt"))
    }

    #[test]
    fn round_trips_through_text() {
        for cfg in [ArchConfig::dit_toy(), ArchConfig::dit_xl(), ArchConfig::point_set(), ArchConfig::cnn_toy()] {
            assert_eq!(parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn preset_with_overrides() {
        let cfg = parse("preset = dit_xl\n# comment\ndepth = 2 # trailing\n").unwrap();
        assert_eq!(cfg.hidden, 1152);
        assert_eq!(cfg.depth, 2);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse("hidden = 128\n\nheads = four\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = parse("hidden = 128\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse("patch = 4\ntokens = 10\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse("no equals sign\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        assert!(parse("hidden = 130\nheads = 4\n").is_err());
    }

    #[test]
    fn default_rank_mirrors_dit_xl_ratio() {
        assert_eq!(ArchConfig::dit_xl().default_rank(), 64);
        assert_eq!(ArchConfig::dit_toy().default_rank(), 7);
    }
}
