use ndarray::Array2;
use rand::Rng;

/// One environment transition; `feature` is the gait feature (possibly a
/// stacked window) of the state reached, kept so the imitation bonus can be
/// recomputed whenever the transition is sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub r_env: f64,
    pub feature: Vec<f64>,
    pub next_obs: Vec<f64>,
    /// Ended by a fall; time-limit truncations are stored as non-terminal.
    pub terminal: bool,
}

#[derive(Clone, Debug)]
pub struct ReplayBatch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub r_env: Vec<f64>,
    pub features: Array2<f64>,
    pub next_obs: Array2<f64>,
    pub terminals: Vec<bool>,
}

/// Fixed-capacity ring buffer with uniform sampling; the oldest record is
/// overwritten once full.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    dims: (usize, usize, usize),
    obs: Vec<f64>,
    actions: Vec<f64>,
    r_env: Vec<f64>,
    features: Vec<f64>,
    next_obs: Vec<f64>,
    terminals: Vec<bool>,
    len: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize, feature_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            dims: (obs_dim, act_dim, feature_dim),
            obs: vec![0.0; capacity * obs_dim],
            actions: vec![0.0; capacity * act_dim],
            r_env: vec![0.0; capacity],
            features: vec![0.0; capacity * feature_dim],
            next_obs: vec![0.0; capacity * obs_dim],
            terminals: vec![false; capacity],
            len: 0,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) {
        let (o, a, f) = self.dims;
        assert!(
            t.obs.len() == o && t.next_obs.len() == o && t.action.len() == a && t.feature.len() == f,
            "transition shape does not match the buffer"
        );
        let i = self.cursor;
        self.obs[i * o..(i + 1) * o].copy_from_slice(&t.obs);
        self.next_obs[i * o..(i + 1) * o].copy_from_slice(&t.next_obs);
        self.actions[i * a..(i + 1) * a].copy_from_slice(&t.action);
        self.features[i * f..(i + 1) * f].copy_from_slice(&t.feature);
        self.r_env[i] = t.r_env;
        self.terminals[i] = t.terminal;
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// The `k`-th oldest stored transition.
    pub fn get(&self, k: usize) -> Option<Transition> {
        if k >= self.len {
            return None;
        }
        let start = if self.len == self.capacity { self.cursor } else { 0 };
        let i = (start + k) % self.capacity;
        let (o, a, f) = self.dims;
        Some(Transition {
            obs: self.obs[i * o..(i + 1) * o].to_vec(),
            action: self.actions[i * a..(i + 1) * a].to_vec(),
            r_env: self.r_env[i],
            feature: self.features[i * f..(i + 1) * f].to_vec(),
            next_obs: self.next_obs[i * o..(i + 1) * o].to_vec(),
            terminal: self.terminals[i],
        })
    }

    /// `n` slots drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        assert!(self.len > 0, "sampling from an empty replay buffer");
        (0..n).map(|_| rng.random_range(0..self.len)).collect()
    }

    pub fn batch(&self, idx: &[usize]) -> ReplayBatch {
        let (o, a, _) = self.dims;
        let rows = |src: &[f64], d: usize| Array2::from_shape_fn((idx.len(), d), |(r, c)| src[idx[r] * d + c]);
        ReplayBatch {
            obs: rows(&self.obs, o),
            actions: rows(&self.actions, a),
            r_env: idx.iter().map(|&i| self.r_env[i]).collect(),
            features: self.features_at(idx),
            next_obs: rows(&self.next_obs, o),
            terminals: idx.iter().map(|&i| self.terminals[i]).collect(),
        }
    }

    pub fn features_at(&self, idx: &[usize]) -> Array2<f64> {
        let f = self.dims.2;
        Array2::from_shape_fn((idx.len(), f), |(r, c)| self.features[idx[r] * f + c])
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ReplayBatch {
        let idx = self.sample_indices(n, rng);
        self.batch(&idx)
    }
}
