use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tsgan::networks::{split_rfs, Augment, DiscriminatorSpec, Family, GeneratorSpec};
use tsgan::training::{desk_discriminator, desk_generator, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Index,
    Surface,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FamilyArg {
    Tagan,
    Ttgan,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Tagan => Family::Tagan,
            FamilyArg::Ttgan => Family::Ttgan,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    Desk,
}

/// How surfaces are presented to the networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Pca,
    Returns,
}

/// Contents of a `--config` TOML file. Every key is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Option<Mode>,
    pub family: Option<FamilyArg>,
    pub preset: Option<Preset>,
    pub feature: Option<Feature>,
    pub components: Option<usize>,
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub paths: Option<usize>,
    pub length: Option<usize>,
    pub delta: Option<usize>,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub generator: toml::Table,
    #[serde(default)]
    pub discriminator: toml::Table,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Everything `train` needs, after flags have been laid over the config file.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub family: FamilyArg,
    pub preset: Preset,
    pub feature: Feature,
    pub components: usize,
    pub data: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

/// Window length and receptive field for a preset and mode.
pub fn window(preset: Preset, mode: Mode) -> (usize, usize) {
    match (preset, mode) {
        (Preset::Full, Mode::Index) => (128, 127),
        (Preset::Full, Mode::Surface) => (128, 383),
        (Preset::Desk, _) => (64, 63),
    }
}

pub fn base_specs(preset: Preset, family: Family, mode: Mode, d: usize) -> (GeneratorSpec, DiscriminatorSpec) {
    let (l, f) = window(preset, mode);
    let (mut g, mut dsc) = match (preset, family) {
        (Preset::Desk, Family::Ttgan) => (desk_generator(l, f, d), desk_discriminator(l, d)),
        (_, Family::Ttgan) => (GeneratorSpec::ttgan(l, f, d), DiscriminatorSpec::ttgan(l, d)),
        (_, Family::Tagan) => (GeneratorSpec::tagan(l, f, d), DiscriminatorSpec::tagan(l, d)),
    };
    if preset == Preset::Desk && family == Family::Tagan {
        g.d_h = 32;
        g.n_a = 16;
        dsc.d_m = 32;
        dsc.n_a = 16;
    }
    (g, dsc)
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, table: &toml::Table, what: &str) -> Result<T> {
    let mut value = toml::Value::try_from(base).context("serializing defaults")?;
    let target = value.as_table_mut().expect("struct serializes to a table");
    for (k, v) in table {
        if !target.contains_key(k) {
            bail!("unknown {what} key `{k}`");
        }
        target.insert(k.clone(), v.clone());
    }
    value.try_into().with_context(|| format!("invalid {what} settings"))
}

pub fn generator_overrides(base: &GeneratorSpec, table: &toml::Table) -> Result<GeneratorSpec> {
    let mut g = overlay(base, table, "generator")?;
    let reshaped = table.contains_key("f") || table.contains_key("layers");
    if g.family == Family::Ttgan && reshaped && !table.contains_key("per_layer_rfs") {
        g.per_layer_rfs = split_rfs(g.f, g.layers);
    }
    Ok(g)
}

pub fn discriminator_overrides(base: &DiscriminatorSpec, table: &toml::Table) -> Result<DiscriminatorSpec> {
    overlay(base, table, "discriminator")
}

pub fn train_overrides(base: &TrainConfig, table: &toml::Table) -> Result<TrainConfig> {
    overlay(base, table, "train")
}

pub fn augment_for(mode: Mode, feature: Feature) -> Augment {
    match (mode, feature) {
        (Mode::Index, _) => Augment::Cumsum,
        (Mode::Surface, Feature::Returns) => Augment::Returns,
        (Mode::Surface, Feature::Pca) => Augment::None,
    }
}
