//! Named strategy registries.
//!
//! Interchangeable pieces (timestep distributions, sampling grids, token
//! pickers) sit behind a trait and are chosen at runtime from a spec string
//! like `logit_normal:mean=-0.8,std=0.8`.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::flow::{CosineGrid, GridSchedule, LogitNormalTime, TimestepDist, UniformGrid, UniformTime};
use crate::model::decode::{Greedy, Temperature, TokenPicker};

/// Numeric arguments parsed from the part of a spec after `:`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Args(BTreeMap<String, f64>);

impl Args {
    pub fn parse(s: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for kv in s.split(',').map(str::trim).filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{kv}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{k}` needs a number, got `{v}`")))?;
            map.insert(k.trim().to_string(), v);
        }
        Ok(Self(map))
    }

    pub fn get_or(&self, key: &str, default: f64) -> f64 {
        self.0.get(key).copied().unwrap_or(default)
    }

    fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.0.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!(
                "unknown argument `{k}`, expected one of {known:?}"
            ))),
            None => Ok(()),
        }
    }
}

type Factory<T> = Box<dyn Fn(&Args) -> Result<Box<T>> + Send + Sync>;

struct Entry<T: ?Sized> {
    params: &'static [&'static str],
    make: Factory<T>,
}

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Entry<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `make` under `name`, accepting only the listed argument keys.
    pub fn register(
        &mut self,
        name: &'static str,
        params: &'static [&'static str],
        make: impl Fn(&Args) -> Result<Box<T>> + Send + Sync + 'static,
    ) -> &mut Self {
        let prev = self.entries.insert(
            name,
            Entry {
                params,
                make: Box::new(make),
            },
        );
        assert!(prev.is_none(), "{} `{name}` registered twice", self.kind);
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    /// Builds from `name` or `name:k=v,...`.
    pub fn build(&self, spec: &str) -> Result<Box<T>> {
        let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let entry = self.entries.get(name.trim()).ok_or_else(|| {
            Error::Config(format!(
                "unknown {} `{name}`, expected one of: {}",
                self.kind,
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        let args = Args::parse(rest)?;
        args.check_known(entry.params)?;
        (entry.make)(&args)
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names().collect::<Vec<_>>())
            .finish()
    }
}

pub fn timestep_dists() -> Registry<dyn TimestepDist> {
    let mut r: Registry<dyn TimestepDist> = Registry::new("timestep distribution");
    r.register("uniform", &[], |_| Ok(Box::new(UniformTime) as Box<dyn TimestepDist>));
    r.register("logit_normal", &["mean", "std"], |a| {
        let std = a.get_or("std", 1.0);
        if std <= 0.0 {
            return Err(Error::Config("logit_normal std must be positive".into()));
        }
        let dist = LogitNormalTime {
            mean: a.get_or("mean", 0.0),
            std,
        };
        Ok(Box::new(dist) as Box<dyn TimestepDist>)
    });
    r
}

pub fn grid_schedules() -> Registry<dyn GridSchedule> {
    let mut r: Registry<dyn GridSchedule> = Registry::new("grid schedule");
    r.register("uniform", &[], |_| Ok(Box::new(UniformGrid) as Box<dyn GridSchedule>));
    r.register("cosine", &[], |_| Ok(Box::new(CosineGrid) as Box<dyn GridSchedule>));
    r
}

pub fn token_pickers() -> Registry<dyn TokenPicker> {
    let mut r: Registry<dyn TokenPicker> = Registry::new("token picker");
    r.register("greedy", &[], |_| Ok(Box::new(Greedy) as Box<dyn TokenPicker>));
    r.register("temperature", &["tau"], |a| {
        let tau = a.get_or("tau", 1.0);
        if tau <= 0.0 {
            return Err(Error::Config("temperature tau must be positive".into()));
        }
        Ok(Box::new(Temperature { tau }) as Box<dyn TokenPicker>)
    });
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn builds_by_name_with_args() {
        let d = timestep_dists().build("logit_normal:mean=-0.8,std=0.8").unwrap();
        assert_eq!(d.name(), "logit_normal");
        assert_eq!(timestep_dists().build("uniform").unwrap().name(), "uniform");
        let p = token_pickers().build("temperature:tau=0.5").unwrap();
        let mut s = Stream::new(0);
        let i = p.pick(&[0.0, 50.0, 0.0], &mut s);
        assert_eq!(i, 1);
    }

    #[test]
    fn unknown_names_and_args_are_rejected() {
        let Err(err) = grid_schedules().build("linear") else {
            panic!("built an unknown schedule")
        };
        let err = err.to_string();
        assert!(err.contains("cosine") && err.contains("uniform"), "{err}");
        assert!(timestep_dists().build("uniform:mean=1").is_err());
        assert!(timestep_dists().build("logit_normal:std=x").is_err());
        assert!(token_pickers().build("temperature:tau=0").is_err());
    }

    #[test]
    fn names_are_sorted() {
        assert_eq!(grid_schedules().names().collect::<Vec<_>>(), ["cosine", "uniform"]);
    }
}
