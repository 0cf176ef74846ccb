use serde::{Deserialize, Serialize};

use super::dt::{DtInputs, DtNet, DtStep};
use super::{PolicyConfig, Variant};
use crate::envs::MazeEnv;
use crate::nn::{Checkpoint, Graph, Mlp, OptimizerState, ParamStore, Var};
use crate::rng::SeedStream;
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "policy";

/// Input sizes and the affine normalization of coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub obs_dim: usize,
    /// Zero when goal conditioning is removed.
    pub goal_dim: usize,
    pub n_actions: usize,
    pub obs_offset: Vec<f64>,
    pub goal_offset: Vec<f64>,
    pub scale: f64,
}

impl PolicyArch {
    pub fn for_env(env: &MazeEnv, goal_conditioned: bool) -> Self {
        let (w, h) = (env.spec.width as f64, env.spec.height as f64);
        let centre = vec![(w - 1.0) / 2.0, (h - 1.0) / 2.0];
        PolicyArch {
            obs_dim: env.obs_dim(),
            goal_dim: if goal_conditioned { 2 } else { 0 },
            n_actions: env.num_actions(),
            obs_offset: centre.clone(),
            goal_offset: if goal_conditioned { centre } else { Vec::new() },
            scale: w.max(h) / 2.0,
        }
    }

    pub(crate) fn push_obs(&self, s: &[f64], out: &mut Vec<f64>) {
        out.extend(s.iter().zip(&self.obs_offset).map(|(x, o)| (x - o) / self.scale));
    }

    pub(crate) fn push_goal(&self, g: &[f64], out: &mut Vec<f64>) {
        out.extend(g.iter().zip(&self.goal_offset).map(|(x, o)| (x - o) / self.scale));
    }

    pub(crate) fn push_one_hot(&self, a: Option<usize>, out: &mut Vec<f64>) {
        out.extend((0..self.n_actions).map(|k| f64::from(u8::from(Some(k) == a))));
    }

    fn check(&self, s: &[f64], g: &[f64]) -> Result<()> {
        if s.len() != self.obs_dim || g.len() != self.goal_dim {
            return Err(Error::shape(format!(
                "policy expects obs of {} and goal of {} values, got {} and {}",
                self.obs_dim,
                self.goal_dim,
                s.len(),
                g.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Net {
    Rvs { value: Option<Mlp>, actor: Mlp },
    Dt(DtNet),
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub arch: PolicyArch,
    pub store: ParamStore,
    net: Net,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

impl PolicyModel {
    pub fn new(arch: PolicyArch, config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        if arch.obs_offset.len() != arch.obs_dim || arch.goal_offset.len() != arch.goal_dim {
            return Err(Error::shape("normalization offsets do not match dimensions"));
        }
        let mut rng = SeedStream::new(config.seed).child("policy-init").rng();
        let mut store = ParamStore::new();
        let net = if config.variant.is_dt() {
            Net::Dt(DtNet::new(&mut store, &arch, &config, &mut rng))
        } else {
            let sg = arch.obs_dim + arch.goal_dim;
            let sizes = |input: usize, output: usize| {
                let mut v = vec![input];
                v.extend(&config.hidden);
                v.push(output);
                v
            };
            let value = config
                .variant
                .uses_q()
                .then(|| Mlp::new(&mut store, "value", &sizes(sg, 1), &mut rng));
            let actor_in = sg + usize::from(config.variant.uses_q());
            let actor = Mlp::new(&mut store, "actor", &sizes(actor_in, arch.n_actions), &mut rng);
            Net::Rvs { value, actor }
        };
        Ok(PolicyModel {
            config,
            arch,
            store,
            net,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn context(&self) -> usize {
        match &self.net {
            Net::Dt(dt) => dt.context,
            Net::Rvs { .. } => 1,
        }
    }

    pub fn to_checkpoint(&self, optimizer: Option<OptimizerState>, extra: serde_json::Value) -> Checkpoint {
        let config = serde_json::json!({ "policy": self.config, "arch": self.arch });
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, config, self.store.clone(), optimizer);
        ck.extra = extra;
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let get = |k: &str| {
            ck.config
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("policy checkpoint lacks '{k}'")))
        };
        let config: PolicyConfig = serde_json::from_value(get("policy")?)?;
        let arch: PolicyArch = serde_json::from_value(get("arch")?)?;
        let mut model = PolicyModel::new(arch, config)?;
        let same = model.store.len() == ck.params.len()
            && model
                .store
                .iter()
                .zip(ck.params.iter())
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape());
        if !same {
            return Err(Error::Config("checkpoint parameters do not match the config".into()));
        }
        model.store = ck.params.clone();
        Ok(model)
    }

    pub fn hash(&self) -> String {
        let bytes: Vec<u8> = self.store.flatten().iter().flat_map(|x| x.to_le_bytes()).collect();
        crate::hashing::short_hash(&bytes)
    }

    fn sg_input(&self, s: &[f64], g: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.arch.obs_dim + self.arch.goal_dim + 1);
        self.arch.push_obs(s, &mut x);
        self.arch.push_goal(g, &mut x);
        x
    }

    /// RvS forward on a batch: `sg` is `[n, obs+goal]` normalized, `q` the
    /// actor's conditioning values. Returns `(value [n,1], scores [n, A])`.
    pub(crate) fn rvs_graph(
        &self,
        graph: &mut Graph,
        sg: Vec<f64>,
        q: Option<&[f64]>,
        n: usize,
    ) -> Result<(Option<Var>, Var)> {
        let Net::Rvs { value, actor } = &self.net else {
            return Err(Error::invalid("not an RvS model"));
        };
        let width = self.arch.obs_dim + self.arch.goal_dim;
        let x = graph.constant(vec![n, width], sg)?;
        let v = match value {
            Some(mlp) => Some(mlp.forward(graph, &self.store, x)?),
            None => None,
        };
        let actor_in = match (value, q) {
            (Some(_), Some(q)) => {
                let qv = graph.constant(vec![n, 1], q.to_vec())?;
                graph.concat_cols(&[x, qv])?
            }
            (Some(_), None) => return Err(Error::invalid("Q-conditioned actor needs Q values")),
            (None, _) => x,
        };
        let scores = actor.forward(graph, &self.store, actor_in)?;
        Ok((v, scores))
    }

    pub(crate) fn dt_graph(&self, graph: &mut Graph, inp: &DtInputs) -> Result<(Option<Var>, Var)> {
        let Net::Dt(dt) = &self.net else {
            return Err(Error::invalid("not a sequence model"));
        };
        dt.forward(graph, &self.store, inp)
    }

    /// RvS value prediction `V̂ = v(s, g)`.
    pub fn value(&self, s: &[f64], g: &[f64]) -> Result<f64> {
        self.arch.check(s, g)?;
        match &self.net {
            Net::Rvs { value: Some(v), .. } => Ok(v.eval(&self.store, &self.sg_input(s, g), 1)[0]),
            Net::Rvs { value: None, .. } => Err(Error::invalid("OCBC models have no value head")),
            Net::Dt(_) => {
                let step = DtStep {
                    s: s.to_vec(),
                    g: g.to_vec(),
                    q: 0.0,
                    a: None,
                };
                let (q, _) = self.dt_predict(&[step])?;
                Ok(q[0])
            }
        }
    }

    /// RvS actor scores given an explicit conditioning value.
    pub fn action_scores(&self, s: &[f64], g: &[f64], q: Option<f64>) -> Result<Vec<f64>> {
        self.arch.check(s, g)?;
        let Net::Rvs { value, actor } = &self.net else {
            return Err(Error::invalid("not an RvS model"));
        };
        let mut x = self.sg_input(s, g);
        if value.is_some() {
            x.push(q.ok_or_else(|| Error::invalid("Q-conditioned actor needs a Q value"))?);
        }
        Ok(actor.eval(&self.store, &x, 1))
    }

    /// `(s, g) → V̂ → argmax π(s, g, V̂)`; OCBC skips the value step.
    pub fn infer_rvs(&self, s: &[f64], g: &[f64]) -> Result<usize> {
        let q = match &self.net {
            Net::Rvs { value: Some(_), .. } => Some(self.value(s, g)?),
            Net::Rvs { value: None, .. } => None,
            Net::Dt(_) => return Err(Error::invalid("infer_rvs needs an RvS model")),
        };
        Ok(argmax(&self.action_scores(s, g, q)?))
    }

    /// Actor decision under an explicit conditioning value.
    pub fn infer_rvs_with_q(&self, s: &[f64], g: &[f64], q: f64) -> Result<usize> {
        Ok(argmax(&self.action_scores(s, g, Some(q))?))
    }

    /// One forward pass over a context; returns per-step Q predictions
    /// (zeros for OCBC) and action scores.
    pub fn dt_predict(&self, steps: &[DtStep]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if steps.is_empty() {
            return Err(Error::invalid("empty context"));
        }
        if steps.len() > self.context() {
            return Err(Error::invalid(format!(
                "context of {} steps exceeds K = {}",
                steps.len(),
                self.context()
            )));
        }
        let mut inp = DtInputs {
            batch: 1,
            steps: steps.len(),
            s: Vec::new(),
            g: Vec::new(),
            q: Vec::new(),
            a: Vec::new(),
        };
        for st in steps {
            self.arch.check(&st.s, &st.g)?;
            if st.a.is_some_and(|a| a >= self.arch.n_actions) {
                return Err(Error::invalid("action out of range in context"));
            }
            self.arch.push_obs(&st.s, &mut inp.s);
            self.arch.push_goal(&st.g, &mut inp.g);
            inp.q.push(st.q);
            self.arch.push_one_hot(st.a, &mut inp.a);
        }
        let mut graph = Graph::new();
        let (q, scores) = self.dt_graph(&mut graph, &inp)?;
        let qs = match q {
            Some(q) => graph.value(q).to_vec(),
            None => vec![0.0; steps.len()],
        };
        let scores = graph
            .value(scores)
            .chunks(self.arch.n_actions)
            .map(<[f64]>::to_vec)
            .collect();
        Ok((qs, scores))
    }

    /// Two-pass decision at the newest step: predict `Q̂_t` from tokens up to
    /// `(s_t, g_t)`, then feed it back and read `â_t`. Returns `(a, Q̂_t)`.
    pub fn infer_dt(&self, history: &[DtStep], s: &[f64], g: &[f64]) -> Result<(usize, f64)> {
        let mut steps = history.to_vec();
        steps.push(DtStep {
            s: s.to_vec(),
            g: g.to_vec(),
            q: 0.0,
            a: None,
        });
        let (q, scores) = self.dt_predict(&steps)?;
        if !self.variant().uses_q() {
            return Ok((argmax(scores.last().unwrap()), 0.0));
        }
        let q_hat = *q.last().unwrap();
        steps.last_mut().unwrap().q = q_hat;
        let (_, scores) = self.dt_predict(&steps)?;
        Ok((argmax(scores.last().unwrap()), q_hat))
    }
}

/// Episode-level driver that keeps the sequence-model context.
#[derive(Debug, Clone)]
pub struct PolicyRunner<'a> {
    model: &'a PolicyModel,
    history: Vec<DtStep>,
}

impl<'a> PolicyRunner<'a> {
    pub fn new(model: &'a PolicyModel) -> Self {
        PolicyRunner {
            model,
            history: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Next action; the goal is ignored by models without goal conditioning.
    pub fn act(&mut self, s: &[f64], g: &[f64]) -> Result<usize> {
        let g = if self.model.arch.goal_dim == 0 { &g[..0] } else { g };
        if !self.model.variant().is_dt() {
            return self.model.infer_rvs(s, g);
        }
        let keep = self.model.context() - 1;
        if self.history.len() > keep {
            self.history.drain(..self.history.len() - keep);
        }
        let (a, q) = self.model.infer_dt(&self.history, s, g)?;
        self.history.push(DtStep {
            s: s.to_vec(),
            g: g.to_vec(),
            q,
            a: Some(a),
        });
        Ok(a)
    }
}
