//! Multi-teacher supervision.
//!
//! In routing mode each prompt is scored by the teacher its domain maps to.
//! In weighted mode the per-token teacher log-prob is `sum_i w_i log pi_Ti`,
//! so the token reward is the weighted sum of per-teacher rewards and the
//! distillation loss is the weighted sum of reverse KLs up to a constant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tabular::{score_tokens, TabularPolicy};
use crate::error::{OpdError, Result};
use crate::rollout::{Prompt, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    #[default]
    Routing,
    Weighted,
}

#[derive(Debug, Clone)]
pub struct TeacherEnsemble {
    names: Vec<String>,
    teachers: Vec<TabularPolicy>,
    weights: Vec<f64>,
    routes: BTreeMap<String, String>,
    mode: EnsembleMode,
}

impl TeacherEnsemble {
    /// Routing-mode ensemble.
    pub fn routed(teachers: Vec<(String, TabularPolicy)>, routes: BTreeMap<String, String>) -> Result<Self> {
        let n = teachers.len();
        Self::new(teachers, vec![1.0 / n.max(1) as f64; n], routes, EnsembleMode::Routing)
    }

    /// Weighted-mode ensemble. Weights are normalized to sum to one.
    pub fn weighted(teachers: Vec<(String, TabularPolicy)>, weights: Vec<f64>) -> Result<Self> {
        Self::new(teachers, weights, BTreeMap::new(), EnsembleMode::Weighted)
    }

    pub fn new(
        teachers: Vec<(String, TabularPolicy)>,
        weights: Vec<f64>,
        routes: BTreeMap<String, String>,
        mode: EnsembleMode,
    ) -> Result<Self> {
        if teachers.is_empty() {
            return Err(OpdError::InvalidConfig("ensemble needs at least one teacher".into()));
        }
        if weights.len() != teachers.len() {
            return Err(OpdError::InvalidConfig(format!(
                "{} weights for {} teachers",
                weights.len(),
                teachers.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(OpdError::InvalidConfig(
                "teacher weights must be finite and >= 0".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(OpdError::InvalidConfig("teacher weights sum to zero".into()));
        }
        let (names, teachers): (Vec<_>, Vec<_>) = teachers.into_iter().unzip();
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(OpdError::InvalidConfig(format!("duplicate teacher `{name}`")));
            }
        }
        for (domain, teacher) in &routes {
            if !names.contains(teacher) {
                return Err(OpdError::InvalidConfig(format!(
                    "domain `{domain}` routes to unknown teacher `{teacher}`"
                )));
            }
        }
        if mode == EnsembleMode::Routing && routes.is_empty() {
            return Err(OpdError::InvalidConfig("routing mode needs a routing table".into()));
        }
        let vocab = teachers[0].vocab_size();
        if teachers.iter().any(|t| t.vocab_size() != vocab) {
            return Err(OpdError::InvalidConfig("teachers disagree on vocabulary size".into()));
        }
        Ok(Self {
            names,
            teachers,
            weights: weights.iter().map(|w| w / total).collect(),
            routes,
            mode,
        })
    }

    pub fn mode(&self) -> EnsembleMode {
        self.mode
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn routes(&self) -> &BTreeMap<String, String> {
        &self.routes
    }

    pub fn teacher(&self, name: &str) -> Option<&TabularPolicy> {
        self.names.iter().position(|n| n == name).map(|i| &self.teachers[i])
    }

    pub fn teachers(&self) -> impl Iterator<Item = (&str, &TabularPolicy)> {
        self.names.iter().map(String::as_str).zip(&self.teachers)
    }

    /// Name of the teacher serving `domain`.
    pub fn route(&self, domain: &str) -> Result<&str> {
        self.routes
            .get(domain)
            .map(String::as_str)
            .ok_or_else(|| OpdError::Routing {
                domain: domain.to_string(),
                known: self.routes.keys().cloned().collect(),
            })
    }

    /// Effective per-teacher weights for `prompt`: one-hot under routing.
    pub fn weights_for(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        match self.mode {
            EnsembleMode::Weighted => Ok(self.weights.clone()),
            EnsembleMode::Routing => {
                let name = self.route(&prompt.domain)?;
                Ok(self.names.iter().map(|n| if n == name { 1.0 } else { 0.0 }).collect())
            }
        }
    }
}

/// Per-token teacher log-probs of `response` for `prompt` under the ensemble.
pub fn ensemble_teacher_logprobs(
    ensemble: &TeacherEnsemble,
    prompt: &Prompt,
    response: &[TokenId],
) -> Result<Vec<f64>> {
    match ensemble.mode {
        EnsembleMode::Routing => {
            let name = ensemble.route(&prompt.domain)?;
            let teacher = ensemble.teacher(name).expect("validated route");
            score_tokens(teacher, &prompt.tokens, response)
        }
        EnsembleMode::Weighted => {
            let mut out = vec![0.0; response.len()];
            for (teacher, &w) in ensemble.teachers.iter().zip(&ensemble.weights) {
                let lps = score_tokens(teacher, &prompt.tokens, response)?;
                for (acc, lp) in out.iter_mut().zip(lps) {
                    *acc += w * lp;
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::tabular::ContextOrder;

    fn teacher(logits: [f64; 3]) -> TabularPolicy {
        TabularPolicy::from_logits(3, ContextOrder::Unigram, 1, 2, logits.to_vec()).unwrap()
    }

    #[test]
    fn degenerate_weights_pick_one_teacher() {
        let a = teacher([1.0, 0.0, -1.0]);
        let b = teacher([-2.0, 0.5, 0.0]);
        let ens = TeacherEnsemble::weighted(vec![("a".into(), a.clone()), ("b".into(), b)], vec![1.0, 0.0]).unwrap();
        let p = Prompt::new("p", "x", vec![0]);
        let got = ensemble_teacher_logprobs(&ens, &p, &[0, 1, 2]).unwrap();
        assert_eq!(got, score_tokens(&a, &[0], &[0, 1, 2]).unwrap());
    }

    #[test]
    fn identical_teachers_average_to_themselves() {
        let a = teacher([1.0, 0.0, -1.0]);
        let ens =
            TeacherEnsemble::weighted(vec![("a".into(), a.clone()), ("b".into(), a.clone())], vec![0.5, 0.5]).unwrap();
        let p = Prompt::new("p", "x", vec![0]);
        let got = ensemble_teacher_logprobs(&ens, &p, &[2, 0]).unwrap();
        let want = score_tokens(&a, &[0], &[2, 0]).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_log_probs_average() {
        // token 0 has log-prob -1 under `a` and -3 under `b`
        let la = [-1.0, (1.0 - (-1.0f64).exp()).ln(), f64::NEG_INFINITY];
        let lb = [-3.0, (1.0 - (-3.0f64).exp()).ln(), f64::NEG_INFINITY];
        let clamp = |v: [f64; 3]| v.map(|x| x.max(-700.0));
        let a = teacher(clamp(la));
        let b = teacher(clamp(lb));
        let ens = TeacherEnsemble::weighted(vec![("a".into(), a), ("b".into(), b)], vec![0.5, 0.5]).unwrap();
        let p = Prompt::new("p", "x", vec![]);
        let got = ensemble_teacher_logprobs(&ens, &p, &[0]).unwrap();
        assert!((got[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn routing_picks_domain_teacher() {
        let a = teacher([1.0, 0.0, -1.0]);
        let b = teacher([-2.0, 0.5, 0.0]);
        let routes = BTreeMap::from([("math".to_string(), "b".to_string())]);
        let ens = TeacherEnsemble::routed(vec![("a".into(), a), ("b".into(), b.clone())], routes).unwrap();
        let p = Prompt::new("p", "math", vec![1]);
        assert_eq!(
            ensemble_teacher_logprobs(&ens, &p, &[1, 2]).unwrap(),
            score_tokens(&b, &[1], &[1, 2]).unwrap()
        );
        assert_eq!(ens.weights_for(&p).unwrap(), vec![0.0, 1.0]);
        let q = Prompt::new("q", "poetry", vec![1]);
        assert!(matches!(
            ensemble_teacher_logprobs(&ens, &q, &[1]),
            Err(OpdError::Routing { .. })
        ));
    }

    #[test]
    fn invalid_ensembles_are_rejected() {
        let a = teacher([0.0; 3]);
        let routes = BTreeMap::from([("math".to_string(), "zzz".to_string())]);
        assert!(TeacherEnsemble::routed(vec![("a".into(), a.clone())], routes).is_err());
        assert!(TeacherEnsemble::weighted(vec![("a".into(), a.clone())], vec![-1.0]).is_err());
        assert!(TeacherEnsemble::weighted(vec![("a".into(), a.clone()), ("a".into(), a)], vec![1.0, 1.0]).is_err());
    }
}
