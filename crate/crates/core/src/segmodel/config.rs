use std::fmt;

/// Which pyramid resolutions run the content-enhanced layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Enhancement {
    pub x32: bool,
    pub x16: bool,
    pub x8: bool,
}

impl Enhancement {
    pub const NONE: Self = Self {
        x32: false,
        x16: false,
        x8: false,
    };
    pub const ALL: Self = Self {
        x32: true,
        x16: true,
        x8: true,
    };

    /// The four cumulative settings of the ablation:
    /// `{}`, `{32}`, `{32,16}`, `{32,16,8}`.
    pub const ABLATION: [Self; 4] = [
        Self::NONE,
        Self {
            x32: true,
            x16: false,
            x8: false,
        },
        Self {
            x32: true,
            x16: true,
            x8: false,
        },
        Self::ALL,
    ];

    pub fn at(&self, stride: usize) -> bool {
        match stride {
            32 => self.x32,
            16 => self.x16,
            8 => self.x8,
            _ => false,
        }
    }

    pub fn any(&self) -> bool {
        self.x32 || self.x16 || self.x8
    }

    /// Parses `none` or a comma list of strides, e.g. `32,16`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        let mut out = Self::NONE;
        if s.eq_ignore_ascii_case("none") || s.is_empty() {
            return Some(out);
        }
        for part in s.split(',') {
            match part.trim() {
                "32" => out.x32 = true,
                "16" => out.x16 = true,
                "8" => out.x8 = true,
                _ => return None,
            }
        }
        Some(out)
    }
}

impl fmt::Display for Enhancement {
    /// `none`, or the enabled strides joined by `+` (e.g. `32+16`).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.x32, "32"), (self.x16, "16"), (self.x8, "8")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, s)| *s)
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub n_layers: usize,
    /// Pyramid stride attended by each layer.
    pub resolution_schedule: Vec<usize>,
    pub enhancement: Enhancement,
}

impl DecoderConfig {
    pub fn with_enhancement(enhancement: Enhancement) -> Self {
        Self {
            enhancement,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.resolution_schedule.len() != self.n_layers {
            return Err(format!(
                "schedule has {} entries for {} layers",
                self.resolution_schedule.len(),
                self.n_layers
            ));
        }
        if let Some(bad) = self
            .resolution_schedule
            .iter()
            .find(|s| ![32, 16, 8].contains(*s))
        {
            return Err(format!("schedule stride {bad} not in {{32, 16, 8}}"));
        }
        Ok(())
    }
}

impl Default for DecoderConfig {
    /// Nine layers cycling ×32, ×16, ×8.
    fn default() -> Self {
        Self {
            n_layers: 9,
            resolution_schedule: [32, 16, 8].repeat(3),
            enhancement: Enhancement::ALL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    pub n_queries: usize,
    /// Number of real classes `K`; heads predict `K + 1` with no-object last.
    pub n_classes: usize,
    pub decoder: DecoderConfig,
    pub share_query_proj: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n_queries: 20,
            n_classes: 6,
            decoder: DecoderConfig::default(),
            share_query_proj: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(format!("model width {} must be even and positive", self.d));
        }
        if self.n_queries == 0 {
            return Err("n_queries must be positive".into());
        }
        if self.n_classes == 0 || self.n_classes > 254 {
            return Err(format!("n_classes {} out of range 1..=254", self.n_classes));
        }
        self.decoder.validate()
    }
}
