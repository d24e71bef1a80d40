//! Plain-text model checkpoints.
//!
//! ```text
//! DIFMAML-CKPT v1
//! dim=<M> agent=<k> iter=<i>
//! <M whitespace-separated floats>
//! ```
//!
//! Floats are written in shortest round-trip form, so loading is bit-exact.

use std::path::{Path, PathBuf};

use crate::autodiff::ParamVector;
use crate::error::{Error, Result};

pub const HEADER: &str = "DIFMAML-CKPT v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub agent: usize,
    pub iteration: usize,
    pub w: ParamVector,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER}\ndim={} agent={} iter={}\n",
            self.w.dim(),
            self.agent,
            self.iteration
        );
        let cells: Vec<String> = self.w.iter().map(|x| format!("{x:?}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("malformed checkpoint: {what}"));
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(HEADER) {
            return Err(bad("missing header"));
        }
        let meta = lines.next().ok_or_else(|| bad("missing dimension line"))?;
        let (mut dim, mut agent, mut iteration) = (None, None, None);
        for field in meta.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(field))?;
            let v: usize = v.parse().map_err(|_| bad(field))?;
            match k {
                "dim" => dim = Some(v),
                "agent" => agent = Some(v),
                "iter" => iteration = Some(v),
                _ => return Err(bad(field)),
            }
        }
        let (dim, agent, iteration) = match (dim, agent, iteration) {
            (Some(d), Some(a), Some(i)) => (d, a, i),
            _ => return Err(bad("dimension line needs dim, agent and iter")),
        };
        let values: Vec<f64> = lines
            .flat_map(str::split_whitespace)
            .map(|t| t.parse().map_err(|_| bad(t)))
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::dims(dim, values.len()));
        }
        Ok(Checkpoint {
            agent,
            iteration,
            w: ParamVector::new(values),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// `<dir>/<strategy>_agent<k>.ckpt`.
pub fn checkpoint_path(dir: &Path, strategy: &str, agent: usize) -> PathBuf {
    dir.join(format!("{strategy}_agent{agent}.ckpt"))
}
