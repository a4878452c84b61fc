//! Flat key/value run configuration. Keys mirror the workflow parameter
//! names (`num_runs`, `max_final_dets`, `growth_factor`, ...), namespaced per
//! section: `phase0.*`, `bfgs.*`, `phase1.*`, `phase2.*`, `pt2.*`, `scan.*`,
//! `dist.*`, plus the model block.

use cooci_core::coo::CooConfig;
use cooci_core::hamio::{build_hubbard_graph, read_fcidump, GraphModelSpec, IntegralSet};
use cooci_core::trimci::{Phase0Config, PhaseGrowthConfig};
use std::collections::BTreeMap;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone)]
pub struct Config {
    pub text: String,
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => match line.split_once(char::is_whitespace) {
                    Some((k, v)) => (k.trim(), v.trim()),
                    None => {
                        return Err(ConfigError(format!(
                            "line {}: expected `key = value`, got `{raw}`",
                            lineno + 1
                        )))
                    }
                },
            };
            map.insert(key.to_string(), value.to_string());
        }
        Ok(Config {
            text: text.to_string(),
            map,
        })
    }

    pub fn load(path: &str) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {path}: {e}")))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| ConfigError(format!("{key}: bad number `{v}`"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => {
                // accept scientific notation for large counts
                if let Ok(x) = v.parse::<usize>() {
                    return Ok(x);
                }
                let f: f64 = v
                    .parse()
                    .map_err(|_| ConfigError(format!("{key}: bad count `{v}`")))?;
                if f < 0.0 || f.fract() != 0.0 {
                    return Err(ConfigError(format!("{key}: `{v}` is not a whole count")));
                }
                Ok(f as usize)
            }
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        Ok(self.usize_or(key, default as usize)? as u64)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                other => Err(ConfigError(format!("{key}: bad flag `{other}`"))),
            },
        }
    }

    /// Comma-separated float list; surrounding brackets are accepted.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .trim()
                .trim_start_matches('[')
                .trim_end_matches(']')
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| ConfigError(format!("{key}: bad number `{t}`")))
                })
                .collect::<Result<Vec<f64>, _>>()
                .map(Some),
        }
    }

    /// Build the model integrals from the `model` block.
    pub fn build_model(&self) -> Result<(IntegralSet, String), ConfigError> {
        let model = self.str_or("model", "hubbard");
        let mut ints = match model.as_str() {
            "hubbard" => {
                let spec = GraphModelSpec {
                    sites: self.usize_or("L", 8)?,
                    t: self.f64_or("t", 1.0)?,
                    u: self.f64_or("U", 4.0)?,
                    alpha: self.f64_or("alpha", 0.0)?,
                    seed: self.u64_or("model_seed", 1)?,
                };
                build_hubbard_graph(&spec).map_err(|e| ConfigError(e.to_string()))?
            }
            "fcidump" => {
                let path = self
                    .get("fcidump")
                    .ok_or_else(|| ConfigError("fcidump model needs `fcidump = path`".into()))?;
                read_fcidump(path).map_err(|e| ConfigError(e.to_string()))?
            }
            other => return Err(ConfigError(format!("unknown model `{other}`"))),
        };
        if let Some(na) = self.get("n_alpha") {
            ints.n_alpha = na
                .parse()
                .map_err(|_| ConfigError(format!("n_alpha: bad count `{na}`")))?;
        }
        if let Some(nb) = self.get("n_beta") {
            ints.n_beta = nb
                .parse()
                .map_err(|_| ConfigError(format!("n_beta: bad count `{nb}`")))?;
        }
        if ints.n_alpha > ints.n_orb || ints.n_beta > ints.n_orb {
            return Err(ConfigError(format!(
                "electron counts ({}, {}) exceed {} orbitals",
                ints.n_alpha, ints.n_beta, ints.n_orb
            )));
        }
        Ok((ints, model))
    }

    /// `initial_dets_dict = HF=1, rand=[1,10000]` style value.
    fn parse_initial_dets(&self, key: &str) -> Result<Option<(usize, f64, usize)>, ConfigError> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        let mut hf = 1usize;
        let mut weight = 1.0f64;
        let mut rand = 10_000usize;
        // split on commas outside brackets: `rand=[1,10000]` is one part
        let mut parts: Vec<String> = Vec::new();
        let mut depth = 0usize;
        let mut cur = String::new();
        for ch in v.chars() {
            match ch {
                '[' => {
                    depth += 1;
                    cur.push(ch);
                }
                ']' => {
                    depth = depth.saturating_sub(1);
                    cur.push(ch);
                }
                ',' if depth == 0 => {
                    parts.push(std::mem::take(&mut cur));
                }
                _ => cur.push(ch),
            }
        }
        if !cur.trim().is_empty() {
            parts.push(cur);
        }
        for part in &parts {
            let part = part.trim();
            if let Some(x) = part.strip_prefix("HF=") {
                hf = x
                    .trim()
                    .parse()
                    .map_err(|_| ConfigError(format!("{key}: bad HF count `{x}`")))?;
            } else if let Some(x) = part.strip_prefix("rand=[") {
                let x = x.trim_end_matches(']');
                let mut it = x.split(',');
                let w = it
                    .next()
                    .ok_or_else(|| ConfigError(format!("{key}: rand needs [weight,count]")))?;
                weight = w
                    .trim()
                    .parse()
                    .map_err(|_| ConfigError(format!("{key}: bad weight `{w}`")))?;
                if let Some(c) = it.next() {
                    rand = c
                        .trim()
                        .parse()
                        .map_err(|_| ConfigError(format!("{key}: bad count `{c}`")))?;
                }
            } else if let Some(x) = part.strip_prefix("rand=") {
                rand = x
                    .trim()
                    .parse()
                    .map_err(|_| ConfigError(format!("{key}: bad rand count `{x}`")))?;
            } else if !part.is_empty() {
                return Err(ConfigError(format!("{key}: unrecognized part `{part}`")));
            }
        }
        Ok(Some((hf, weight, rand)))
    }

    pub fn phase0(&self, seed_override: Option<u64>) -> Result<Phase0Config, ConfigError> {
        let d = Phase0Config::default();
        let (init_hf, init_weight, init_random) = self
            .parse_initial_dets("phase0.initial_dets_dict")?
            .unwrap_or((d.init_hf, d.init_weight, d.init_random));
        let ratio = self
            .f64_list("phase0.core_set_ratio")?
            .map(|v| {
                if v.len() == 2 {
                    Ok((v[0], v[1]))
                } else {
                    Err(ConfigError("phase0.core_set_ratio needs two numbers".into()))
                }
            })
            .transpose()?
            .unwrap_or(d.core_set_ratio);
        Ok(Phase0Config {
            num_runs: self.usize_or("phase0.num_runs", d.num_runs)?,
            cycles: self.usize_or("phase0.cycles", d.cycles)?,
            max_final_dets: self.usize_or("phase0.max_final_dets", d.max_final_dets)?,
            init_hf,
            init_random: self.usize_or("phase0.init_random", init_random)?,
            init_weight,
            first_cycle_keep_size: self
                .usize_or("phase0.first_cycle_keep_size", d.first_cycle_keep_size)?,
            threshold: self.f64_or("phase0.threshold", d.threshold)?,
            pool_core_ratio: self.f64_or("phase0.pool_core_ratio", d.pool_core_ratio)?,
            core_set_ratio: ratio,
            num_groups: self.usize_or("phase0.num_groups", d.num_groups)?,
            local_trim_keep_ratio: self
                .f64_or("phase0.local_trim_keep_ratio", d.local_trim_keep_ratio)?,
            max_rounds: self.usize_or("phase0.max_rounds", d.max_rounds)?,
            seed: seed_override.unwrap_or(self.u64_or("seed", d.seed)?),
            orbital_optimization: self
                .bool_or("phase0.orbital_optimization", d.orbital_optimization)?,
            tracking_dets: self.bool_or("phase0.tracking_dets", d.tracking_dets)?,
            loaded_dets_randomness: self
                .f64_or("phase0.loaded_dets_randomness", d.loaded_dets_randomness)?,
            target_basin: self.get("phase0.target_basin").map(String::from),
            trim_davidson_tol: self.f64_or("phase0.trim_davidson_tol", d.trim_davidson_tol)?,
            max_inner_rounds: self.usize_or("phase0.max_inner_rounds", d.max_inner_rounds)?,
        })
    }

    pub fn bfgs(&self) -> Result<CooConfig, ConfigError> {
        let d = CooConfig::default();
        Ok(CooConfig {
            maxiter: self.usize_or("bfgs.maxiter", d.maxiter)?,
            ftol: self.f64_or("bfgs.ftol", d.ftol)?,
            davidson_tol: self.f64_or("bfgs.davidson_tol", d.davidson_tol)?,
            delta_tol: self.f64_or("bfgs.delta_tol", d.delta_tol)?,
            max_line_search: self.usize_or("bfgs.max_line_search", d.max_line_search)?,
            b0_probe_step: self.f64_or("bfgs.b0_probe_step", d.b0_probe_step)?,
            curvature_floor: self.f64_or("bfgs.curvature_floor", d.curvature_floor)?,
            ridge: self.f64_or("bfgs.ridge", d.ridge)?,
        })
    }

    pub fn growth(&self, section: &str, seed: u64) -> Result<PhaseGrowthConfig, ConfigError> {
        let d = match section {
            "phase1" => PhaseGrowthConfig::phase1_defaults(),
            _ => PhaseGrowthConfig::phase2_defaults(),
        };
        let key = |name: &str| format!("{section}.{name}");
        Ok(PhaseGrowthConfig {
            max_n_dets: self.usize_or(&key("max_n_dets"), d.max_n_dets)?,
            growth_factor: self.f64_or(&key("growth_factor"), d.growth_factor)?,
            orbital_optimization: self
                .bool_or(&key("orbital_optimization"), d.orbital_optimization)?,
            orbital_opt_max_iter: self
                .usize_or(&key("orbital_opt_max_iter"), d.orbital_opt_max_iter)?,
            use_connection_cache: self
                .bool_or(&key("use_connection_cache"), d.use_connection_cache)?,
            davidson_energy_tol: self
                .f64_or(&key("davidson.energy_tol"), d.davidson_energy_tol)?,
            pt2_correction: self.bool_or(&key("pt2_correction"), d.pt2_correction)?,
            pt2_eps_hc: self.f64_or(&key("pt2_eps_hc"), d.pt2_eps_hc)?,
            expansion_slack: self.f64_or(&key("expansion_slack"), d.expansion_slack)?,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_table_style_keys() {
        let text = "\
model = hubbard
L = 4
alpha = 0.5
U = 4.0
model_seed = 7
phase0.num_runs = 8
phase0.initial_dets_dict = HF=1, rand=[1,500]
phase0.core_set_ratio = [1.0, 1.1]
phase1.growth_factor = 1.2
phase1.davidson.energy_tol = 1e-5
";
        let cfg = Config::parse(text).unwrap();
        let (ints, model) = cfg.build_model().unwrap();
        assert_eq!(model, "hubbard");
        assert_eq!(ints.n_orb, 4);
        let p0 = cfg.phase0(None).unwrap();
        assert_eq!(p0.num_runs, 8);
        assert_eq!(p0.init_random, 500);
        assert_eq!(p0.cycles, 10); // default preserved
        let p1 = cfg.growth("phase1", 3).unwrap();
        assert_eq!(p1.growth_factor, 1.2);
        assert_eq!(p1.davidson_energy_tol, 1e-5);
        let p2 = cfg.growth("phase2", 3).unwrap();
        assert_eq!(p2.growth_factor, 2.0);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(Config::parse("only-a-key-no-value").is_err());
        let cfg = Config::parse("phase0.num_runs = many").unwrap();
        assert!(cfg.phase0(None).is_err());
    }

    #[test]
    fn scientific_counts() {
        let cfg = Config::parse("phase2.max_n_dets = 1e6").unwrap();
        assert_eq!(cfg.growth("phase2", 0).unwrap().max_n_dets, 1_000_000);
    }
}
