//! Line-oriented `key = value` run configuration with `[section]` headers.
//!
//! Unknown sections or keys are errors, reported with their line number.
//! Lists are comma separated. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dgcrf_core::crf::{Bandwidths, CrfParams};
use dgcrf_core::data::{DisparityLaw, Pattern, SynthRecipe};
use dgcrf_core::networks::ModelSpec;
use dgcrf_core::objectives::LossWeights;
use dgcrf_core::trainer::{TrainConfig, Variant};

use crate::error::{read_text, Error, Result};

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    line: usize,
    used: bool,
}

/// Parsed but untyped sections. Typed getters mark entries as consumed so
/// leftovers can be reported.
#[derive(Debug)]
pub struct Sections {
    origin: String,
    sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)>,
}

impl Sections {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| Error::Config {
                path: origin.to_string(),
                line,
                message,
            };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header {content:?}")))?
                    .trim()
                    .to_string();
                if sections.contains_key(&name) {
                    return Err(err(format!("section [{name}] appears twice")));
                }
                sections.insert(name.clone(), (line, BTreeMap::new()));
                current = Some(name);
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found {content:?}")))?;
            let key = key.trim().to_string();
            let section = current
                .as_ref()
                .ok_or_else(|| err(format!("`{key}` appears before any [section]")))?;
            let entries = &mut sections.get_mut(section).expect("inserted above").1;
            let entry = Entry {
                value: value.trim().to_string(),
                line,
                used: false,
            };
            if entries.insert(key.clone(), entry).is_some() {
                return Err(err(format!("duplicate key `{key}` in [{section}]")));
            }
        }
        Ok(Self {
            origin: origin.to_string(),
            sections,
        })
    }

    fn err(&self, line: usize, message: String) -> Error {
        Error::Config {
            path: self.origin.clone(),
            line,
            message,
        }
    }

    fn has(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    fn raw(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        let e = self.sections.get_mut(section)?.1.get_mut(key)?;
        e.used = true;
        Some((e.value.clone(), e.line))
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str, into: &mut T) -> Result<()> {
        if let Some((v, line)) = self.raw(section, key) {
            *into = v
                .parse()
                .map_err(|_| self.err(line, format!("[{section}] {key}: cannot parse {v:?}")))?;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<(Vec<T>, usize)>> {
        let Some((v, line)) = self.raw(section, key) else {
            return Ok(None);
        };
        let items = v
            .split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| self.err(line, format!("[{section}] {key}: cannot parse {s:?}"))))
            .collect::<Result<Vec<T>>>()?;
        Ok(Some((items, line)))
    }

    fn get_list<T: FromStr>(&mut self, section: &str, key: &str, into: &mut Vec<T>) -> Result<()> {
        if let Some((items, _)) = self.list(section, key)? {
            *into = items;
        }
        Ok(())
    }

    fn pair(&mut self, section: &str, key: &str) -> Result<Option<([f64; 2], usize)>> {
        match self.list::<f64>(section, key)? {
            None => Ok(None),
            Some((v, line)) if v.len() == 2 => Ok(Some(([v[0], v[1]], line))),
            Some((_, line)) => Err(self.err(line, format!("[{section}] {key}: expected two values"))),
        }
    }

    /// Fails on the first section or key that no getter consumed.
    fn finish(self, known_sections: &[&str]) -> Result<()> {
        let mut leftovers: Vec<(usize, String)> = Vec::new();
        for (name, (line, entries)) in &self.sections {
            if !known_sections.contains(&name.as_str()) {
                leftovers.push((*line, format!("unknown section [{name}]")));
                continue;
            }
            for (key, e) in entries {
                if !e.used {
                    leftovers.push((e.line, format!("unknown key `{key}` in [{name}]")));
                }
            }
        }
        match leftovers.into_iter().min() {
            Some((line, message)) => Err(self.err(line, message)),
            None => Ok(()),
        }
    }
}

fn bool_value(s: &mut Sections, section: &str, key: &str, into: &mut bool) -> Result<()> {
    if let Some((v, line)) = s.raw(section, key) {
        *into = match v.as_str() {
            "true" | "yes" | "1" => true,
            "false" | "no" | "0" => false,
            _ => return Err(s.err(line, format!("[{section}] {key}: expected true or false"))),
        };
    }
    Ok(())
}

fn model_from(s: &mut Sections) -> Result<ModelSpec> {
    let mut m = ModelSpec::default();
    s.get("model", "image_channels", &mut m.image_channels)?;
    s.get_list("model", "encoder", &mut m.encoder)?;
    s.get("model", "shared_depth", &mut m.shared_depth)?;
    s.get_list("model", "hall_encoder", &mut m.hall_encoder)?;
    s.get_list("model", "disc", &mut m.disc)?;
    s.get("model", "down_kernel", &mut m.down_kernel)?;
    s.get("model", "kernel", &mut m.kernel)?;
    s.get("model", "d_max_ratio", &mut m.d_max_ratio)?;
    m.crf = crf_from(s)?;
    m.validate().map_err(|e| s.err(section_line(s, "model"), e.to_string()))?;
    Ok(m)
}

fn section_line(s: &Sections, name: &str) -> usize {
    s.sections.get(name).map_or(0, |(l, _)| *l)
}

fn crf_from(s: &mut Sections) -> Result<CrfParams> {
    let mut c = CrfParams::default();
    let mut b = Bandwidths::default();
    s.get("crf", "theta_alpha", &mut b.theta_alpha)?;
    s.get("crf", "theta_beta", &mut b.theta_beta)?;
    s.get("crf", "theta_gamma", &mut b.theta_gamma)?;
    c.bandwidths = b;
    s.get("crf", "window", &mut c.window)?;
    s.get("crf", "iterations", &mut c.iterations)?;
    for (plain, log, slot) in [("alpha", "log_alpha", 0), ("beta", "log_beta", 1)] {
        let target = if slot == 0 { &mut c.log_alpha } else { &mut c.log_beta };
        match (s.pair("crf", plain)?, s.pair("crf", log)?) {
            (Some(_), Some((_, line))) => {
                return Err(s.err(line, format!("[crf] give either {plain} or {log}, not both")))
            }
            (Some((v, line)), None) => {
                if v.iter().any(|x| !(*x > 0.0)) {
                    return Err(s.err(line, format!("[crf] {plain} must be positive")));
                }
                *target = v.map(f64::ln);
            }
            (None, Some((v, _))) => *target = v,
            (None, None) => {}
        }
    }
    c.validate().map_err(|e| s.err(section_line(s, "crf"), e.to_string()))?;
    Ok(c)
}

fn train_from(s: &mut Sections) -> Result<TrainConfig> {
    let mut t = TrainConfig::default();
    s.get("train", "lr", &mut t.lr)?;
    s.get("train", "momentum", &mut t.momentum)?;
    s.get("train", "weight_decay", &mut t.weight_decay)?;
    s.get("train", "batch_size", &mut t.batch_size)?;
    s.get_list("train", "lr_steps", &mut t.lr_steps)?;
    s.get("train", "lr_decay_factor", &mut t.lr_decay_factor)?;
    s.get("train", "max_iters", &mut t.max_iters)?;
    s.get("train", "seed", &mut t.seed)?;
    s.get("train", "d_steps", &mut t.d_steps)?;
    bool_value(s, "train", "symmetric_recon", &mut t.symmetric_recon)?;
    bool_value(s, "train", "symmetric_disc", &mut t.symmetric_disc)?;
    bool_value(s, "train", "crf_weight_decay", &mut t.crf_weight_decay)?;
    s.get("train", "checkpoint_every", &mut t.checkpoint_every)?;
    s.get("train", "bank_cache_bytes", &mut t.bank_cache_bytes)?;
    let mut gamma = LossWeights::default().gamma;
    for (i, key) in ["gamma1", "gamma2", "gamma3"].into_iter().enumerate() {
        s.get("loss", key, &mut gamma[i])?;
    }
    t.loss = LossWeights { gamma };
    t.validate().map_err(|e| s.err(section_line(s, "train"), e.to_string()))?;
    Ok(t)
}

/// Where training samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SynthRecipe),
    /// Tab-separated manifest; relative paths resolve against its directory.
    Manifest {
        path: PathBuf,
        focal_px: f64,
        baseline_m: f64,
    },
}

fn pattern_name(p: Pattern) -> &'static str {
    match p {
        Pattern::Noise => "noise",
        Pattern::Blocks => "blocks",
    }
}

fn data_from(s: &mut Sections, base: &Path) -> Result<DataSource> {
    let mut r = SynthRecipe::default();
    let mut source = String::from("synthetic");
    s.get("data", "source", &mut source)?;
    s.get("data", "focal", &mut r.focal_px)?;
    s.get("data", "baseline", &mut r.baseline_m)?;
    if source == "manifest" {
        let (path, _) = s
            .raw("data", "manifest")
            .ok_or_else(|| s.err(section_line(s, "data"), "[data] source = manifest needs `manifest = <path>`".into()))?;
        return Ok(DataSource::Manifest {
            path: base.join(path),
            focal_px: r.focal_px,
            baseline_m: r.baseline_m,
        });
    }
    if source != "synthetic" {
        let line = s.sections["data"].1["source"].line;
        return Err(s.err(line, format!("[data] unknown source {source:?}")));
    }
    s.get("data", "width", &mut r.width)?;
    s.get("data", "height", &mut r.height)?;
    s.get("data", "noise", &mut r.noise)?;
    s.get("data", "count", &mut r.count)?;
    s.get("data", "seed", &mut r.seed)?;
    s.get("data", "d_max", &mut r.d_max)?;
    if let Some((v, line)) = s.raw("data", "pattern") {
        r.pattern = match v.as_str() {
            "noise" => Pattern::Noise,
            "blocks" => Pattern::Blocks,
            _ => return Err(s.err(line, format!("[data] unknown pattern {v:?}"))),
        };
    }
    let law = s.raw("data", "law");
    let values = s.list::<f64>("data", "disparity")?;
    let law_line = law.as_ref().map_or(section_line(s, "data"), |(_, l)| *l);
    let name = law.map_or_else(|| "constant".to_string(), |(v, _)| v);
    let values = values.map(|(v, _)| v);
    r.law = match (name.as_str(), values.as_deref()) {
        ("constant", None) => DisparityLaw::Constant(4.0),
        ("constant", Some(&[v])) => DisparityLaw::Constant(v),
        ("two-region", Some(&[background, foreground])) => DisparityLaw::TwoRegion { background, foreground },
        ("planar", Some(&[left, right])) => DisparityLaw::Planar { left, right },
        ("constant" | "two-region" | "planar", _) => {
            return Err(s.err(law_line, format!("[data] wrong number of disparity values for law {name}")))
        }
        _ => return Err(s.err(law_line, format!("[data] unknown law {name:?}"))),
    };
    r.validate().map_err(|e| s.err(law_line, e.to_string()))?;
    Ok(DataSource::Synthetic(r))
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataSource,
    /// Variant named in the file, if any; the command line may override it.
    pub variant: Option<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            data: DataSource::Synthetic(SynthRecipe::default()),
            variant: None,
        }
    }
}

impl RunConfig {
    /// `origin` names the source in error messages; `base` anchors relative
    /// paths.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut s = Sections::parse(text, origin)?;
        let model = model_from(&mut s)?;
        let train = train_from(&mut s)?;
        let data = if s.has("data") {
            data_from(&mut s, base)?
        } else {
            DataSource::Synthetic(SynthRecipe::default())
        };
        let mut variant = None;
        if let Some((v, line)) = s.raw("train", "variant") {
            variant = Some(v.parse().map_err(|e: dgcrf_core::Error| s.err(line, e.to_string()))?);
        }
        s.finish(&["model", "crf", "train", "loss", "data"])?;
        Ok(Self {
            model,
            train,
            data,
            variant,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    /// Renders every resolved value; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let mut out = model_text(&self.model);
        let t = &self.train;
        let mut w = |k: &str, v: String| match k.strip_prefix('[') {
            Some(_) => writeln!(out, "\n{k}").expect("string write"),
            None => writeln!(out, "{k} = {v}").expect("string write"),
        };
        w("[train]", String::new());
        if let Some(v) = self.variant {
            w("variant", v.to_string());
        }
        w("lr", format!("{:?}", t.lr));
        w("momentum", format!("{:?}", t.momentum));
        w("weight_decay", format!("{:?}", t.weight_decay));
        w("batch_size", t.batch_size.to_string());
        w("lr_steps", join(&t.lr_steps));
        w("lr_decay_factor", format!("{:?}", t.lr_decay_factor));
        w("max_iters", t.max_iters.to_string());
        w("seed", t.seed.to_string());
        w("d_steps", t.d_steps.to_string());
        w("symmetric_recon", t.symmetric_recon.to_string());
        w("symmetric_disc", t.symmetric_disc.to_string());
        w("crf_weight_decay", t.crf_weight_decay.to_string());
        w("checkpoint_every", t.checkpoint_every.to_string());
        w("bank_cache_bytes", t.bank_cache_bytes.to_string());
        w("[loss]", String::new());
        for (i, g) in t.loss.gamma.iter().enumerate() {
            w(&format!("gamma{}", i + 1), format!("{g:?}"));
        }
        w("[data]", String::new());
        match &self.data {
            DataSource::Manifest {
                path,
                focal_px,
                baseline_m,
            } => {
                w("source", "manifest".into());
                w("manifest", path.display().to_string());
                w("focal", format!("{focal_px:?}"));
                w("baseline", format!("{baseline_m:?}"));
            }
            DataSource::Synthetic(r) => {
                let (law, values) = match r.law {
                    DisparityLaw::Constant(v) => ("constant", vec![v]),
                    DisparityLaw::TwoRegion { background, foreground } => ("two-region", vec![background, foreground]),
                    DisparityLaw::Planar { left, right } => ("planar", vec![left, right]),
                };
                w("source", "synthetic".into());
                w("width", r.width.to_string());
                w("height", r.height.to_string());
                w("pattern", pattern_name(r.pattern).into());
                w("law", law.into());
                w("disparity", values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", "));
                w("noise", format!("{:?}", r.noise));
                w("count", r.count.to_string());
                w("seed", r.seed.to_string());
                w("d_max", format!("{:?}", r.d_max));
                w("focal", format!("{:?}", r.focal_px));
                w("baseline", format!("{:?}", r.baseline_m));
            }
        }
        out
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

/// `[model]` and `[crf]` sections with exact float formatting.
pub fn model_text(m: &ModelSpec) -> String {
    let c = &m.crf;
    let pair = |p: [f64; 2]| format!("{:?}, {:?}", p[0], p[1]);
    format!(
        "[model]\nimage_channels = {}\nencoder = {}\nshared_depth = {}\nhall_encoder = {}\ndisc = {}\n\
         down_kernel = {}\nkernel = {}\nd_max_ratio = {:?}\n\n[crf]\nlog_alpha = {}\nlog_beta = {}\n\
         theta_alpha = {:?}\ntheta_beta = {:?}\ntheta_gamma = {:?}\nwindow = {}\niterations = {}\n",
        m.image_channels,
        join(&m.encoder),
        m.shared_depth,
        join(&m.hall_encoder),
        join(&m.disc),
        m.down_kernel,
        m.kernel,
        m.d_max_ratio,
        pair(c.log_alpha),
        pair(c.log_beta),
        c.bandwidths.theta_alpha,
        c.bandwidths.theta_beta,
        c.bandwidths.theta_gamma,
        c.window,
        c.iterations,
    )
}

/// Parses text produced by [`model_text`] plus any extra sections the
/// caller consumes through `extra`.
pub(crate) fn parse_model_with<T>(
    text: &str,
    origin: &str,
    extra_sections: &[&str],
    extra: impl FnOnce(&mut SectionReader<'_>) -> Result<T>,
) -> Result<(ModelSpec, T)> {
    let mut s = Sections::parse(text, origin)?;
    let model = model_from(&mut s)?;
    let t = extra(&mut SectionReader(&mut s))?;
    let mut known = vec!["model", "crf"];
    known.extend_from_slice(extra_sections);
    s.finish(&known)?;
    Ok((model, t))
}

/// Typed access to the sections of a parsed file.
pub(crate) struct SectionReader<'a>(&'a mut Sections);

impl SectionReader<'_> {
    pub fn required<T: FromStr>(&mut self, section: &str, key: &str) -> Result<T> {
        let s = &mut *self.0;
        let (v, line) = s
            .raw(section, key)
            .ok_or_else(|| s.err(section_line(s, section), format!("[{section}] missing `{key}`")))?;
        v.parse()
            .map_err(|_| s.err(line, format!("[{section}] {key}: cannot parse {v:?}")))
    }
}
