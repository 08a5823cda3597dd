use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use log::info;

use dfr_core::datagen::DatasetManifest;
use dfr_net::checkpoint::save_checkpoint;
use dfr_net::model::{Model, NetworkConfig, Variant};
use dfr_net::train::{train, Regime, TrainConfig, TrainingData};

use super::read_config;
use crate::error::{require, CliError, Result};
use crate::provenance::Provenance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Widths {
    /// Full-size layer widths.
    Full,
    /// Narrow layers for reduced-resolution runs.
    Small,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `key = value` training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = Variant::Basic)]
    pub variant: Variant,
    #[arg(long, default_value_t = Regime::SingleStage)]
    pub regime: Regime,
    /// Checkpoint path.
    #[arg(long)]
    pub output: PathBuf,
    /// Loss history CSV; defaults to `<output>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Widths::Full)]
    pub widths: Widths,
    /// Drop the atrous spatial pyramid.
    #[arg(long)]
    pub no_pyramid: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
}

impl Args {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::parse(&read_config(p)?)?,
            None => TrainConfig::default(),
        };
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("stage1_epochs", self.stage1_epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("patience", self.patience.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, &v).map_err(CliError::Validation)?;
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn history_path(&self) -> PathBuf {
        self.history.clone().unwrap_or_else(|| {
            let mut s = self.output.as_os_str().to_owned();
            s.push(".history.csv");
            PathBuf::from(s)
        })
    }
}

/// The network input size is the dataset's image size.
pub fn run(a: &Args) -> Result<()> {
    require(&a.manifest, "manifest")?;
    let cfg = a.config()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let data = TrainingData::from_manifest(&manifest)?;
    let first = data.train.first().ok_or_else(|| CliError::validation("manifest has no training samples"))?;
    let (w, h) = (first.image.width() as usize, first.image.height() as usize);
    if w != h {
        return Err(CliError::validation(format!("network input must be square, dataset images are {w}x{h}")));
    }
    let mut net = match a.widths {
        Widths::Full => NetworkConfig { input_size_px: w, ..NetworkConfig::default() },
        Widths::Small => NetworkConfig::small(w),
    };
    net.use_pyramid = !a.no_pyramid;
    net.validate()?;
    let mut model = Model::build(net, a.variant, cfg.seed)?;
    info!("{} network with {} parameters", a.variant, model.count_parameters());
    let out = train(&mut model, &data, a.regime, &cfg)?;

    let mut prov = Provenance::new("train").seed(cfg.seed).input("manifest", &a.manifest)?;
    if let Some(p) = &a.config {
        prov = prov.input("config", p)?;
    }
    prov = prov.set("variant", a.variant).set("regime", a.regime).set("use_pyramid", !a.no_pyramid);
    let mut meta: BTreeMap<String, String> = prov.entries.iter().cloned().collect();
    meta.insert("train_config".into(), cfg.to_text());
    meta.insert("mode".into(), manifest.meta_value("mode").unwrap_or("thin").into());
    meta.insert("best_epoch".into(), out.best_epoch.to_string());
    meta.insert("best_valid_dis_reg".into(), out.best_valid_dis_reg.to_string());
    save_checkpoint(&model, &meta, &a.output)?;
    fs::write(a.history_path(), out.history.to_csv(&prov.entries))?;
    info!("best epoch {} of {}, validation dis_reg {:.5}", out.best_epoch, out.epochs_run, out.best_valid_dis_reg);
    Ok(())
}
