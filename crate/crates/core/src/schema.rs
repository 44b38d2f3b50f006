//! JSON documents for finite CMDPs.
//!
//! ```json
//! {"layers": [["s0"], ["x", "y"]], "actions": ["a", "b"], "horizon": 1,
//!  "contexts": [{"id": "c0", "vector": [1.0], "prob": 1.0}],
//!  "transitions": {"*": {"0,0,0": [0.3, 0.7], "0,0,1": [0.6, 0.4]}},
//!  "rewards": {"c0": {"0,0,0": 0.2, "0,0,1": 0.9}}}
//! ```
//!
//! Transition keys name a context id, or `"*"` for dynamics shared by every
//! context. Numbers round-trip exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::mdp::{Cmdp, Context, Dynamics, LayeredMdp, Layout, Naming, RewardNoise};

/// Transition key for dynamics shared by all contexts.
pub const SHARED: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub id: String,
    pub vector: Vec<f64>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmdpDocument {
    pub layers: Vec<Vec<String>>,
    pub actions: Vec<String>,
    pub horizon: usize,
    pub contexts: Vec<ContextEntry>,
    pub transitions: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    pub rewards: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub noise: RewardNoise,
}

fn key(h: usize, s: usize, a: usize) -> String {
    format!("{h},{s},{a}")
}

fn rows_of(d: &Dynamics) -> BTreeMap<String, Vec<f64>> {
    let layout = d.layout();
    let mut out = BTreeMap::new();
    for h in 0..layout.horizon() {
        for s in layout.states(h) {
            for a in 0..layout.n_actions() {
                out.insert(key(h, s, a), d.row(h, s, a).to_vec());
            }
        }
    }
    out
}

impl CmdpDocument {
    pub fn from_cmdp(cmdp: &Cmdp) -> Result<Self> {
        let (contexts, probs) = cmdp.finite_contexts().ok_or(LabError::InfiniteContextSpace)?;
        let layout = cmdp.layout();
        let mut transitions = BTreeMap::new();
        let mut rewards = BTreeMap::new();
        let mut noise = RewardNoise::default();
        for (i, c) in contexts.iter().enumerate() {
            let m = cmdp.mdp_of(c)?;
            if i == 0 {
                noise = m.noise();
                if cmdp.context_free_dynamics() {
                    transitions.insert(SHARED.to_string(), rows_of(m.dynamics()));
                }
            }
            if !cmdp.context_free_dynamics() {
                transitions.insert(c.id.clone(), rows_of(m.dynamics()));
            }
            let mut table = BTreeMap::new();
            for h in 0..layout.horizon() {
                for s in layout.states(h) {
                    for a in 0..layout.n_actions() {
                        table.insert(key(h, s, a), m.reward(h, s, a));
                    }
                }
            }
            rewards.insert(c.id.clone(), table);
        }
        Ok(Self {
            layers: cmdp.naming().states.clone(),
            actions: cmdp.naming().actions.clone(),
            horizon: layout.horizon(),
            contexts: contexts
                .iter()
                .zip(probs)
                .map(|(c, &prob)| ContextEntry {
                    id: c.id.clone(),
                    vector: c.vector.clone(),
                    prob,
                })
                .collect(),
            transitions,
            rewards,
            noise,
        })
    }

    pub fn to_cmdp(&self) -> Result<Cmdp> {
        if self.layers.len() != self.horizon + 1 {
            return Err(LabError::Config(format!(
                "{} state layers given for horizon {}",
                self.layers.len(),
                self.horizon
            )));
        }
        let layout = Layout::new(self.layers.iter().map(Vec::len).collect(), self.actions.len())?;
        let naming = Naming {
            states: self.layers.clone(),
            actions: self.actions.clone(),
        };
        let shared = match self.transitions.get(SHARED) {
            Some(rows) if self.transitions.len() == 1 => Some(Arc::new(self.dynamics(&layout, SHARED, rows)?)),
            Some(_) => {
                return Err(LabError::Config(
                    "shared transitions cannot be mixed with per-context ones".into(),
                ))
            }
            None => None,
        };
        let mut entries = Vec::with_capacity(self.contexts.len());
        for entry in &self.contexts {
            let dynamics = match &shared {
                Some(d) => d.clone(),
                None => {
                    let rows = self.transitions.get(&entry.id).ok_or_else(|| {
                        LabError::Config(format!("no transitions for context `{}`", entry.id))
                    })?;
                    Arc::new(self.dynamics(&layout, &entry.id, rows)?)
                }
            };
            let table = self
                .rewards
                .get(&entry.id)
                .ok_or_else(|| LabError::Config(format!("no rewards for context `{}`", entry.id)))?;
            let mut rewards: Vec<Vec<f64>> = (0..layout.horizon())
                .map(|h| vec![0.0; layout.layer_size(h) * layout.n_actions()])
                .collect();
            for (k, &r) in table {
                let (h, s, a) = parse_key(k, &layout)?;
                rewards[h][s * layout.n_actions() + a] = r;
            }
            let m = LayeredMdp::new(dynamics, rewards, self.noise)?;
            entries.push((Context::new(entry.id.clone(), entry.vector.clone()), entry.prob, m));
        }
        Cmdp::finite(layout, naming, entries, shared.is_some())
    }

    fn dynamics(&self, layout: &Layout, owner: &str, rows: &BTreeMap<String, Vec<f64>>) -> Result<Dynamics> {
        let mut d = Dynamics::zeros(layout.clone());
        for (k, row) in rows {
            let (h, s, a) = parse_key(k, layout)?;
            d.set_row(h, s, a, row)?;
        }
        for h in 0..layout.horizon() {
            for s in layout.states(h) {
                for a in 0..layout.n_actions() {
                    if !rows.contains_key(&key(h, s, a)) {
                        return Err(LabError::Config(format!("transitions `{owner}` miss row {}", key(h, s, a))));
                    }
                }
            }
        }
        d.validate()?;
        Ok(d)
    }
}

fn parse_key(k: &str, layout: &Layout) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = k
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| LabError::Config(format!("malformed key `{k}`, expected \"h,s,a\"")))?;
    let [h, s, a] = parts[..] else {
        return Err(LabError::Config(format!("malformed key `{k}`, expected \"h,s,a\"")));
    };
    if h >= layout.horizon() || s >= layout.layer_size(h) || a >= layout.n_actions() {
        return Err(LabError::UnknownState { h, s });
    }
    Ok((h, s, a))
}

pub fn load_cmdp<R: Read>(reader: R) -> Result<Cmdp> {
    let doc: CmdpDocument = serde_json::from_reader(reader)?;
    doc.to_cmdp()
}

pub fn save_cmdp<W: Write>(cmdp: &Cmdp, writer: W) -> Result<()> {
    serde_json::to_writer_pretty(writer, &CmdpDocument::from_cmdp(cmdp)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"{
        "layers": [["s0"], ["x", "y"]],
        "actions": ["a", "b"],
        "horizon": 1,
        "contexts": [{"id": "c0", "vector": [1.0], "prob": 0.3}, {"id": "c1", "vector": [-1.0], "prob": 0.7}],
        "transitions": {"*": {"0,0,0": [0.3, 0.7], "0,0,1": [0.6, 0.4]}},
        "rewards": {"c0": {"0,0,0": 0.2, "0,0,1": 0.9}, "c1": {"0,0,0": 0.1, "0,0,1": 0.123456789012345}}
    }"#;

    #[test]
    fn example_loads() {
        let cmdp = load_cmdp(EXAMPLE.as_bytes()).unwrap();
        assert!(cmdp.context_free_dynamics());
        let (contexts, probs) = cmdp.finite_contexts().unwrap();
        assert_eq!(probs, &[0.3, 0.7]);
        let m = cmdp.mdp_of(&contexts[1]).unwrap();
        assert_eq!(m.dynamics().row(0, 0, 1), &[0.6, 0.4]);
        assert_eq!(m.reward(0, 0, 1), 0.123456789012345);
    }

    #[test]
    fn round_trip_is_exact() {
        let doc: CmdpDocument = serde_json::from_str(EXAMPLE).unwrap();
        let again = CmdpDocument::from_cmdp(&doc.to_cmdp().unwrap()).unwrap();
        assert_eq!(doc, again);
        let mut buf = Vec::new();
        save_cmdp(&doc.to_cmdp().unwrap(), &mut buf).unwrap();
        let reread: CmdpDocument = serde_json::from_slice(&buf).unwrap();
        assert_eq!(reread, doc);
    }

    #[test]
    fn per_context_dynamics_round_trip() {
        let mut doc: CmdpDocument = serde_json::from_str(EXAMPLE).unwrap();
        let rows = doc.transitions.remove(SHARED).unwrap();
        let mut other = rows.clone();
        other.insert("0,0,0".into(), vec![0.1, 0.9]);
        doc.transitions.insert("c0".into(), rows);
        doc.transitions.insert("c1".into(), other);
        let cmdp = doc.to_cmdp().unwrap();
        assert!(!cmdp.context_free_dynamics());
        assert_eq!(CmdpDocument::from_cmdp(&cmdp).unwrap(), doc);
    }

    #[test]
    fn bad_documents_are_rejected() {
        let mut doc: CmdpDocument = serde_json::from_str(EXAMPLE).unwrap();
        doc.transitions.get_mut(SHARED).unwrap().insert("0,0,0".into(), vec![0.3, 0.6]);
        assert!(matches!(doc.to_cmdp(), Err(LabError::RowNotStochastic { .. })));
        let mut doc: CmdpDocument = serde_json::from_str(EXAMPLE).unwrap();
        doc.transitions.get_mut(SHARED).unwrap().remove("0,0,1");
        assert!(matches!(doc.to_cmdp(), Err(LabError::Config(_))));
        let mut doc: CmdpDocument = serde_json::from_str(EXAMPLE).unwrap();
        doc.rewards.get_mut("c0").unwrap().insert("0,5,0".into(), 0.1);
        assert!(matches!(doc.to_cmdp(), Err(LabError::UnknownState { h: 0, s: 5 })));
        assert!(load_cmdp(r#"{"layers": []}"#.as_bytes()).is_err());
    }
}
