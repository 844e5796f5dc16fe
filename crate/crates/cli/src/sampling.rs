use anyhow::{bail, Context};
use clap::Args;
use coso::coso::{CosoConfig, Variant};
use coso::filter::FilterNet;
use std::path::PathBuf;

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

/// Flags that describe a sampling operator.
#[derive(Args, Debug, Clone, Default)]
pub struct SamplingArgs {
    /// JSON sampling configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Total CS ratio γ.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long = "gamma-d")]
    pub gamma_d: Option<f64>,
    #[arg(long = "gamma-g")]
    pub gamma_g: Option<f64>,
    /// Block size B of the G-branch.
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long = "seed-perm")]
    pub seed_perm: Option<u64>,
    #[arg(long = "seed-gauss")]
    pub seed_gauss: Option<u64>,
    /// Filtering network weights (required by full_coso).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// full_coso, dual_no_filter, g_branch_scrambled, dual_no_permute, dct_only or block_gaussian.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

impl SamplingArgs {
    /// Builds the configuration. `image_dims` comes from the input image when
    /// there is one and must agree with any configured size.
    pub fn resolve(&self, image_dims: Option<(usize, usize)>) -> anyhow::Result<CosoConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let mut cfg = CosoConfig::from_json(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?;
                if let (Some(w), Some(dir)) = (&cfg.weights_path, path.parent()) {
                    if w.is_relative() {
                        cfg.weights_path = Some(dir.join(w));
                    }
                }
                cfg
            }
            None => {
                let (h, w) = match (self.height, self.width, image_dims) {
                    (Some(h), Some(w), _) => (h, w),
                    (_, _, Some(d)) => d,
                    _ => bail!("image size unknown: pass --height and --width or --config"),
                };
                let mut cfg = CosoConfig::new(h, w, 0.0, Variant::DualNoFilter);
                cfg.gamma = None;
                cfg
            }
        };
        if let Some(h) = self.height {
            cfg.height = h;
        }
        if let Some(w) = self.width {
            cfg.width = w;
        }
        if let Some((h, w)) = image_dims {
            if (cfg.height, cfg.width) != (h, w) {
                bail!(
                    "image is {h}x{w} but the configuration expects {}x{}",
                    cfg.height,
                    cfg.width
                );
            }
        }
        if self.gamma.is_some() {
            cfg.gamma = self.gamma;
        }
        if self.gamma_d.is_some() {
            cfg.gamma_d = self.gamma_d;
        }
        if self.gamma_g.is_some() {
            cfg.gamma_g = self.gamma_g;
        }
        if let Some(b) = self.block {
            cfg.block = b;
        }
        if let Some(s) = self.seed_perm {
            cfg.perm_seed = s;
        }
        if let Some(s) = self.seed_gauss {
            cfg.gauss_seed = s;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(w) = &self.weights {
            cfg.weights_path = Some(w.clone());
        }
        cfg.layout()?;
        Ok(cfg)
    }
}

/// Loads the filtering network when the variant needs one.
pub fn load_network(cfg: &CosoConfig) -> anyhow::Result<Option<FilterNet>> {
    if !cfg.variant.uses_filter() {
        return Ok(None);
    }
    let Some(path) = &cfg.weights_path else {
        bail!("variant full_coso needs --weights (create one with `coso init-weights`)");
    };
    let net = FilterNet::load(path).with_context(|| format!("loading weights {}", path.display()))?;
    Ok(Some(net))
}
