//! Output heads over the encoder: cluster-gated adaptive softmax for
//! language modeling, the binary token-classification head, the BiLSTM
//! residual encoder, and the BiLSTM-CRF head with exact Viterbi decoding.

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, TensorId};
use crate::Rng;

/// Binary tagging: keyword / not-keyword.
pub const NUM_CLASSES: usize = 2;
/// Transition-matrix row index of the virtual start state.
pub const CRF_START: usize = NUM_CLASSES;

// ── adaptive softmax ────────────────────────────────────────────────────

/// Absolute cluster boundaries over the vocabulary id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterBounds {
    pub head_end: usize,
    pub mid_end: usize,
    pub size: usize,
}

impl ClusterBounds {
    pub fn new(head_end: usize, mid_end: usize, size: usize) -> Result<Self> {
        if !(0 < head_end && head_end <= mid_end && mid_end <= size) {
            return Err(Error::Parameter(format!(
                "bad cluster bounds {head_end}/{mid_end}/{size}"
            )));
        }
        Ok(ClusterBounds {
            head_end,
            mid_end,
            size,
        })
    }

    pub fn has_mid(&self) -> bool {
        self.mid_end > self.head_end
    }

    pub fn has_tail(&self) -> bool {
        self.size > self.mid_end
    }

    /// Gate columns appended to the head cluster's logits.
    pub fn num_gates(&self) -> usize {
        self.has_mid() as usize + self.has_tail() as usize
    }

    fn gate_col(&self, tail: bool) -> usize {
        if tail {
            self.head_end + self.has_mid() as usize
        } else {
            self.head_end
        }
    }

    fn cluster_of(&self, id: usize) -> usize {
        if id < self.head_end {
            0
        } else if id < self.mid_end {
            1
        } else {
            2
        }
    }
}

/// Projection nodes for one reduced-dimension tail cluster.
pub struct TailClusterNodes {
    pub w_proj: TensorId,
    pub w_out: TensorId,
    pub b_out: TensorId,
}

/// Tape nodes of the adaptive softmax head. The head projection emits the
/// frequent-token logits plus one gate logit per non-empty extra cluster.
pub struct AdaptiveSoftmaxNodes {
    pub w_head: TensorId,
    pub b_head: TensorId,
    pub mid: Option<TailClusterNodes>,
    pub tail: Option<TailClusterNodes>,
}

fn cluster_log_probs<T: Element>(
    g: &mut Graph<T>,
    hidden: TensorId,
    nodes: &TailClusterNodes,
) -> Result<TensorId> {
    let proj = g.matmul(hidden, nodes.w_proj)?;
    let logits = g.matmul(proj, nodes.w_out)?;
    let logits = g.add_row(logits, nodes.b_out)?;
    g.log_softmax_rows(logits)
}

/// Log-probability of each position's target token under the two-stage
/// cluster-gated softmax. Returns a `[n]` node.
pub fn lm_log_probs<T: Element>(
    g: &mut Graph<T>,
    hidden: TensorId,
    targets: &[u32],
    nodes: &AdaptiveSoftmaxNodes,
    bounds: ClusterBounds,
) -> Result<TensorId> {
    let n = g.shape(hidden)[0];
    if targets.len() != n {
        return Err(Error::Contract(format!(
            "lm_log_probs: {} targets for {n} positions",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= bounds.size) {
        return Err(Error::Contract(format!(
            "lm_log_probs: target id {bad} outside vocabulary of {}",
            bounds.size
        )));
    }

    let head_logits = g.matmul(hidden, nodes.w_head)?;
    let head_logits = g.add_row(head_logits, nodes.b_head)?;
    let head_lsm = g.log_softmax_rows(head_logits)?;

    // positions whose target sits in the head cluster resolve in one stage
    let mut head_coords = Vec::new();
    let mut head_positions = Vec::new();
    let mut mid_positions = Vec::new();
    let mut tail_positions = Vec::new();
    for (pos, &t) in targets.iter().enumerate() {
        match bounds.cluster_of(t as usize) {
            0 => {
                head_positions.push(pos);
                head_coords.push((pos, t as usize));
            }
            1 => mid_positions.push(pos),
            _ => tail_positions.push(pos),
        }
    }

    let mut total: Option<TensorId> = None;
    let accumulate = |g: &mut Graph<T>, part: TensorId, total: &mut Option<TensorId>| -> Result<()> {
        *total = Some(match *total {
            Some(t) => g.add(t, part)?,
            None => part,
        });
        Ok(())
    };

    if !head_positions.is_empty() {
        let vals = g.gather_entries(head_lsm, &head_coords)?;
        let part = g.scatter_vec(vals, &head_positions, n)?;
        accumulate(g, part, &mut total)?;
    }
    for (positions, cluster, is_tail, lo) in [
        (&mid_positions, &nodes.mid, false, bounds.head_end),
        (&tail_positions, &nodes.tail, true, bounds.mid_end),
    ] {
        if positions.is_empty() {
            continue;
        }
        let cluster = cluster
            .as_ref()
            .ok_or_else(|| Error::Contract("target in a cluster this head does not carry".into()))?;
        let gate_col = bounds.gate_col(is_tail);
        let gate_coords: Vec<(usize, usize)> = positions.iter().map(|&p| (p, gate_col)).collect();
        let gates = g.gather_entries(head_lsm, &gate_coords)?;
        let sub_hidden = g.gather_rows(hidden, positions)?;
        let lsm = cluster_log_probs(g, sub_hidden, cluster)?;
        let inner_coords: Vec<(usize, usize)> = positions
            .iter()
            .enumerate()
            .map(|(k, &p)| (k, targets[p] as usize - lo))
            .collect();
        let inner = g.gather_entries(lsm, &inner_coords)?;
        let vals = g.add(gates, inner)?;
        let part = g.scatter_vec(vals, positions, n)?;
        accumulate(g, part, &mut total)?;
    }
    Ok(total.expect("at least one position"))
}

/// Full `[n x |V|]` log-probability matrix; mathematically the same
/// distribution as [`lm_log_probs`] assembled column-wise. Used for
/// validity checks and inspection, not the training hot path.
pub fn lm_full_log_probs<T: Element>(
    g: &mut Graph<T>,
    hidden: TensorId,
    nodes: &AdaptiveSoftmaxNodes,
    bounds: ClusterBounds,
) -> Result<TensorId> {
    let n = g.shape(hidden)[0];
    let head_logits = g.matmul(hidden, nodes.w_head)?;
    let head_logits = g.add_row(head_logits, nodes.b_head)?;
    let head_lsm = g.log_softmax_rows(head_logits)?;
    let mut out = g.slice_cols(head_lsm, 0, bounds.head_end)?;
    for (present, cluster, is_tail) in [
        (bounds.has_mid(), &nodes.mid, false),
        (bounds.has_tail(), &nodes.tail, true),
    ] {
        if !present {
            continue;
        }
        let cluster = cluster
            .as_ref()
            .ok_or_else(|| Error::Contract("missing cluster projection".into()))?;
        let gate_col = bounds.gate_col(is_tail);
        let gate = g.slice_cols(head_lsm, gate_col, gate_col + 1)?;
        let gate_vec = g.reshape(gate, vec![n])?;
        let lsm = cluster_log_probs(g, hidden, cluster)?;
        let shifted = g.add_col(lsm, gate_vec)?;
        out = g.concat_cols(out, shifted)?;
    }
    Ok(out)
}

// ── token classification head ───────────────────────────────────────────

/// Linear classifier nodes (`d -> 2`).
pub struct ClassifierNodes {
    pub w: TensorId,
    pub b: TensorId,
}

/// ReLU -> dropout -> linear -> per-position log-softmax over two classes.
pub fn token_classification<T: Element>(
    g: &mut Graph<T>,
    hidden: TensorId,
    nodes: &ClassifierNodes,
    dropout_rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<TensorId> {
    let activated = g.relu(hidden);
    let dropped = g.dropout(activated, dropout_rate, training, rng)?;
    let logits = g.matmul(dropped, nodes.w)?;
    let logits = g.add_row(logits, nodes.b)?;
    g.log_softmax_rows(logits)
}

// ── BiLSTM ──────────────────────────────────────────────────────────────

/// One direction's LSTM parameters; gate order in the fused matrices is
/// input, forget, cell, output.
pub struct LstmDirNodes {
    pub w_x: TensorId,
    pub w_h: TensorId,
    pub b: TensorId,
}

pub struct BiLstmNodes {
    pub fwd: LstmDirNodes,
    pub bwd: LstmDirNodes,
}

/// Run one LSTM direction over `x [n x in]`, producing `[n x hidden]` in
/// original position order.
pub fn lstm_direction<T: Element>(
    g: &mut Graph<T>,
    x: TensorId,
    nodes: &LstmDirNodes,
    hidden_size: usize,
    reverse: bool,
) -> Result<TensorId> {
    let n = g.shape(x)[0];
    let mut h_prev = g.constant(vec![1, hidden_size], vec![T::ZERO; hidden_size]);
    let mut c_prev = g.constant(vec![1, hidden_size], vec![T::ZERO; hidden_size]);
    let mut outputs = vec![0usize; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let x_t = g.slice_rows(x, t, t + 1)?;
        let zx = g.matmul(x_t, nodes.w_x)?;
        let zh = g.matmul(h_prev, nodes.w_h)?;
        let z = g.add(zx, zh)?;
        let z = g.add_row(z, nodes.b)?;
        let i_gate = g.slice_cols(z, 0, hidden_size)?;
        let i_gate = g.sigmoid(i_gate);
        let f_gate = g.slice_cols(z, hidden_size, 2 * hidden_size)?;
        let f_gate = g.sigmoid(f_gate);
        let g_cell = g.slice_cols(z, 2 * hidden_size, 3 * hidden_size)?;
        let g_cell = g.tanh(g_cell);
        let o_gate = g.slice_cols(z, 3 * hidden_size, 4 * hidden_size)?;
        let o_gate = g.sigmoid(o_gate);
        let keep = g.mul(f_gate, c_prev)?;
        let write = g.mul(i_gate, g_cell)?;
        let c = g.add(keep, write)?;
        let c_act = g.tanh(c);
        let h = g.mul(o_gate, c_act)?;
        outputs[t] = h;
        h_prev = h;
        c_prev = c;
    }
    g.stack_rows(&outputs)
}

/// Bidirectional layer: forward and backward halves concatenated.
pub fn bilstm<T: Element>(
    g: &mut Graph<T>,
    x: TensorId,
    nodes: &BiLstmNodes,
    hidden_size: usize,
) -> Result<TensorId> {
    let f = lstm_direction(g, x, &nodes.fwd, hidden_size, false)?;
    let b = lstm_direction(g, x, &nodes.bwd, hidden_size, true)?;
    g.concat_cols(f, b)
}

/// Residual recurrent encoder: `hidden + BiLSTM2(BiLSTM1(dropout(hidden)))`.
/// Each direction carries `d/2` units so the concatenated output is `d`.
pub fn bilstm_residual<T: Element>(
    g: &mut Graph<T>,
    hidden: TensorId,
    layer1: &BiLstmNodes,
    layer2: &BiLstmNodes,
    dropout_rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<TensorId> {
    let d = g.shape(hidden)[1];
    let half = d / 2;
    let dropped = g.dropout(hidden, dropout_rate, training, rng)?;
    let h1 = bilstm(g, dropped, layer1, half)?;
    let h2 = bilstm(g, h1, layer2, half)?;
    g.add(hidden, h2)
}

// ── linear-chain CRF ────────────────────────────────────────────────────

fn check_crf_inputs<T>(emissions: &[T], labels: &[usize]) -> Result<usize> {
    let n = emissions.len() / NUM_CLASSES;
    if n * NUM_CLASSES != emissions.len() {
        return Err(Error::Contract("crf: emissions not n x 2".into()));
    }
    if labels.len() != n {
        return Err(Error::Contract(format!("crf: {} labels for {n} positions", labels.len())));
    }
    if labels.iter().any(|&y| y >= NUM_CLASSES) {
        return Err(Error::Contract("crf: label out of range".into()));
    }
    Ok(n)
}

/// Path score `s(f, y) = tau[start, y_0] + f[0, y_0] + sum_t tau[y_{t-1},
/// y_t] + f[t, y_t]`, on plain values. `transitions` is `[(NC+1) x NC]`
/// with the virtual-start row last.
pub fn crf_score<T: Element>(emissions: &[T], labels: &[usize], transitions: &[T]) -> Result<T> {
    let n = check_crf_inputs(emissions, labels)?;
    if n == 0 {
        return Ok(T::ZERO);
    }
    let mut score = transitions[CRF_START * NUM_CLASSES + labels[0]] + emissions[labels[0]];
    for t in 1..n {
        score += transitions[labels[t - 1] * NUM_CLASSES + labels[t]];
        score += emissions[t * NUM_CLASSES + labels[t]];
    }
    Ok(score)
}

/// Log-partition via the forward algorithm, on the tape (differentiable in
/// both emissions and transitions). `O(n * NC^2)`.
pub fn crf_forward_logz<T: Element>(
    g: &mut Graph<T>,
    emissions: TensorId,
    transitions: TensorId,
) -> Result<TensorId> {
    let n = g.shape(emissions)[0];
    if n == 0 {
        return Err(Error::Contract("crf: empty sequence".into()));
    }
    let start_row = g.slice_rows(transitions, CRF_START, CRF_START + 1)?;
    let f0 = g.slice_rows(emissions, 0, 1)?;
    let mut alpha = g.add(f0, start_row)?; // [1 x 2]
    let trans_block = g.slice_rows(transitions, 0, NUM_CLASSES)?;
    for t in 1..n {
        let prev = g.reshape(alpha, vec![NUM_CLASSES])?;
        let moved = g.add_col(trans_block, prev)?; // m[i][j] = tau[i][j] + alpha[i]
        let lse = g.logsumexp_cols(moved)?;
        let lse_row = g.reshape(lse, vec![1, NUM_CLASSES])?;
        let f_t = g.slice_rows(emissions, t, t + 1)?;
        alpha = g.add(f_t, lse_row)?;
    }
    Ok(g.logsumexp_all(alpha))
}

/// `log p(y | f) = s(f, y) - log Z`, differentiable.
pub fn crf_log_prob<T: Element>(
    g: &mut Graph<T>,
    emissions: TensorId,
    labels: &[usize],
    transitions: TensorId,
) -> Result<TensorId> {
    let n = g.shape(emissions)[0];
    check_crf_inputs(&vec![T::ZERO; n * NUM_CLASSES], labels)?;
    let mut em_coords = Vec::with_capacity(n);
    let mut tr_coords = Vec::with_capacity(n);
    for (t, &y) in labels.iter().enumerate() {
        em_coords.push((t, y));
        tr_coords.push(if t == 0 { (CRF_START, y) } else { (labels[t - 1], y) });
    }
    let em = g.gather_entries(emissions, &em_coords)?;
    let em_sum = g.sum_all(em);
    let tr = g.gather_entries(transitions, &tr_coords)?;
    let tr_sum = g.sum_all(tr);
    let score = g.add(em_sum, tr_sum)?;
    let logz = crf_forward_logz(g, emissions, transitions)?;
    let neg_logz = g.scale(logz, -T::ONE);
    g.add(score, neg_logz)
}

/// Exact max-score decoding. Ties break toward the lexicographically
/// smaller label sequence: a backward best-completion table lets the
/// front-to-back pass greedily take the smallest label that still attains
/// the optimum. Returns `(labels, best score)`; an empty input decodes to
/// `([], 0)`.
pub fn viterbi_decode<T: Element>(emissions: &[T], transitions: &[T]) -> (Vec<usize>, T) {
    let n = emissions.len() / NUM_CLASSES;
    if n == 0 {
        return (Vec::new(), T::ZERO);
    }
    // best[t][j]: best score of a suffix starting at t with label j
    // (includes the emission at t, excludes the arriving transition).
    let mut best = vec![[T::ZERO; NUM_CLASSES]; n];
    for j in 0..NUM_CLASSES {
        best[n - 1][j] = emissions[(n - 1) * NUM_CLASSES + j];
    }
    for t in (0..n - 1).rev() {
        for j in 0..NUM_CLASSES {
            let mut m = T::neg_infinity();
            for k in 0..NUM_CLASSES {
                let cand = transitions[j * NUM_CLASSES + k] + best[t + 1][k];
                m = m.maximum(cand);
            }
            best[t][j] = emissions[t * NUM_CLASSES + j] + m;
        }
    }
    let mut labels: Vec<usize> = Vec::with_capacity(n);
    let mut total = T::ZERO;
    for t in 0..n {
        let mut best_j = 0;
        let mut best_v = T::neg_infinity();
        for j in 0..NUM_CLASSES {
            let arrive = if t == 0 {
                transitions[CRF_START * NUM_CLASSES + j]
            } else {
                transitions[labels[t - 1] * NUM_CLASSES + j]
            };
            let v = arrive + best[t][j];
            if v > best_v {
                best_v = v;
                best_j = j;
            }
        }
        if t == 0 {
            total = best_v;
        }
        labels.push(best_j);
    }
    (labels, total)
}

/// Posterior `P(y_t = 1 | f)` per position via forward-backward, used to
/// rank CRF-decoded keyphrases. Plain value math.
pub fn crf_marginals<T: Element>(emissions: &[T], transitions: &[T]) -> Vec<T> {
    let n = emissions.len() / NUM_CLASSES;
    if n == 0 {
        return Vec::new();
    }
    let lse2 = |a: T, b: T| {
        let m = a.maximum(b);
        if !m.is_finite() {
            return m;
        }
        m + ((a - m).exp() + (b - m).exp()).ln()
    };
    let mut alpha = vec![[T::ZERO; NUM_CLASSES]; n];
    for j in 0..NUM_CLASSES {
        alpha[0][j] = transitions[CRF_START * NUM_CLASSES + j] + emissions[j];
    }
    for t in 1..n {
        for j in 0..NUM_CLASSES {
            let a = alpha[t - 1][0] + transitions[j];
            let b = alpha[t - 1][1] + transitions[NUM_CLASSES + j];
            alpha[t][j] = lse2(a, b) + emissions[t * NUM_CLASSES + j];
        }
    }
    let mut beta = vec![[T::ZERO; NUM_CLASSES]; n];
    for t in (0..n - 1).rev() {
        for j in 0..NUM_CLASSES {
            let a = transitions[j * NUM_CLASSES] + emissions[(t + 1) * NUM_CLASSES] + beta[t + 1][0];
            let b = transitions[j * NUM_CLASSES + 1] + emissions[(t + 1) * NUM_CLASSES + 1] + beta[t + 1][1];
            beta[t][j] = lse2(a, b);
        }
    }
    let logz = lse2(alpha[n - 1][0], alpha[n - 1][1]);
    (0..n)
        .map(|t| (alpha[t][1] + beta[t][1] - logz).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use rand::Rng as _;

    fn rnd(rng: &mut crate::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| 2.0 * (rng.gen::<f64>() - 0.5)).collect()
    }

    // ── adaptive softmax ────────────────────────────────────────────────

    struct AdaptiveFixture {
        g: Graph<f64>,
        nodes: AdaptiveSoftmaxNodes,
        bounds: ClusterBounds,
        hidden: TensorId,
    }

    fn adaptive_fixture(rng: &mut crate::Rng, n: usize, d: usize, bounds: ClusterBounds) -> AdaptiveFixture {
        let mut g: Graph<f64> = Graph::new();
        let hidden = g.leaf(vec![n, d], rnd(rng, n * d));
        let head_cols = bounds.head_end + bounds.num_gates();
        let w_head = g.leaf(vec![d, head_cols], rnd(rng, d * head_cols));
        let b_head = g.leaf(vec![head_cols], rnd(rng, head_cols));
        let mut mk_cluster = |g: &mut Graph<f64>, rng: &mut crate::Rng, width: usize, proj: usize| {
            TailClusterNodes {
                w_proj: g.leaf(vec![d, proj], rnd(rng, d * proj)),
                w_out: g.leaf(vec![proj, width], rnd(rng, proj * width)),
                b_out: g.leaf(vec![width], rnd(rng, width)),
            }
        };
        let mid = bounds
            .has_mid()
            .then(|| mk_cluster(&mut g, rng, bounds.mid_end - bounds.head_end, d / 2));
        let tail = bounds
            .has_tail()
            .then(|| mk_cluster(&mut g, rng, bounds.size - bounds.mid_end, d / 4));
        AdaptiveFixture {
            g,
            nodes: AdaptiveSoftmaxNodes {
                w_head,
                b_head,
                mid,
                tail,
            },
            bounds,
            hidden,
        }
    }

    #[test]
    fn adaptive_softmax_is_a_distribution_over_full_vocab() {
        let mut rng = rng_from_seed(2);
        let bounds = ClusterBounds::new(4, 7, 10).unwrap();
        let mut fx = adaptive_fixture(&mut rng, 3, 8, bounds);
        let full = lm_full_log_probs(&mut fx.g, fx.hidden, &fx.nodes, fx.bounds).unwrap();
        assert_eq!(fx.g.shape(full), &[3, 10]);
        for i in 0..3 {
            let s: f64 = fx.g.values(full)[i * 10..(i + 1) * 10].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
        }
    }

    #[test]
    fn adaptive_softmax_two_routes_agree() {
        // per-target gathering must match the assembled full matrix
        let mut rng = rng_from_seed(14);
        let bounds = ClusterBounds::new(4, 7, 10).unwrap();
        let mut fx = adaptive_fixture(&mut rng, 5, 8, bounds);
        let targets: Vec<u32> = vec![0, 5, 9, 3, 8];
        let fast = lm_log_probs(&mut fx.g, fx.hidden, &targets, &fx.nodes, fx.bounds).unwrap();
        let full = lm_full_log_probs(&mut fx.g, fx.hidden, &fx.nodes, fx.bounds).unwrap();
        for (pos, &t) in targets.iter().enumerate() {
            let a = fx.g.values(fast)[pos];
            let b = fx.g.values(full)[pos * 10 + t as usize];
            assert!((a - b).abs() < 1e-12, "position {pos}");
        }
    }

    #[test]
    fn adaptive_softmax_matches_brute_force_two_stage() {
        // hand-set toy: recompute cluster gating with straight loops
        let mut rng = rng_from_seed(7);
        let bounds = ClusterBounds::new(4, 7, 10).unwrap();
        let (n, d) = (2, 8);
        let mut fx = adaptive_fixture(&mut rng, n, d, bounds);
        let full = lm_full_log_probs(&mut fx.g, fx.hidden, &fx.nodes, fx.bounds).unwrap();

        let log_softmax = |logits: &[f64]| -> Vec<f64> {
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            logits.iter().map(|v| v - lse).collect()
        };
        let matvec = |g: &Graph<f64>, x: &[f64], w: TensorId, rows: usize, cols: usize| -> Vec<f64> {
            let wv = g.values(w);
            (0..cols)
                .map(|j| (0..rows).map(|i| x[i] * wv[i * cols + j]).sum())
                .collect()
        };
        for pos in 0..n {
            let h = fx.g.values(fx.hidden)[pos * d..(pos + 1) * d].to_vec();
            let head_cols = bounds.head_end + 2;
            let mut head_logits = matvec(&fx.g, &h, fx.nodes.w_head, d, head_cols);
            for (j, l) in head_logits.iter_mut().enumerate() {
                *l += fx.g.values(fx.nodes.b_head)[j];
            }
            let head_lp = log_softmax(&head_logits);
            let mut expect = head_lp[..bounds.head_end].to_vec();
            for (cluster, gate, lo, hi) in [
                (fx.nodes.mid.as_ref().unwrap(), head_lp[4], 4usize, 7usize),
                (fx.nodes.tail.as_ref().unwrap(), head_lp[5], 7, 10),
            ] {
                let pdim = fx.g.shape(cluster.w_proj)[1];
                let proj = matvec(&fx.g, &h, cluster.w_proj, d, pdim);
                let mut logits = matvec(&fx.g, &proj, cluster.w_out, pdim, hi - lo);
                for (j, l) in logits.iter_mut().enumerate() {
                    *l += fx.g.values(cluster.b_out)[j];
                }
                let lp = log_softmax(&logits);
                expect.extend(lp.iter().map(|v| v + gate));
            }
            for (j, e) in expect.iter().enumerate() {
                let got = fx.g.values(full)[pos * 10 + j];
                assert!((got - e).abs() < 1e-9, "pos {pos} token {j}: {got} vs {e}");
            }
        }
    }

    #[test]
    fn adaptive_softmax_single_cluster_equals_plain_log_softmax() {
        let mut rng = rng_from_seed(4);
        let bounds = ClusterBounds::new(10, 10, 10).unwrap();
        let mut fx = adaptive_fixture(&mut rng, 3, 8, bounds);
        assert!(fx.nodes.mid.is_none() && fx.nodes.tail.is_none());
        let full = lm_full_log_probs(&mut fx.g, fx.hidden, &fx.nodes, fx.bounds).unwrap();
        let logits = fx.g.matmul(fx.hidden, fx.nodes.w_head).unwrap();
        let logits = fx.g.add_row(logits, fx.nodes.b_head).unwrap();
        let plain = fx.g.log_softmax_rows(logits).unwrap();
        for (a, b) in fx.g.values(full).iter().zip(fx.g.values(plain)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_softmax_rejects_out_of_range_target() {
        let mut rng = rng_from_seed(8);
        let bounds = ClusterBounds::new(4, 7, 10).unwrap();
        let mut fx = adaptive_fixture(&mut rng, 2, 8, bounds);
        assert!(lm_log_probs(&mut fx.g, fx.hidden, &[0, 10], &fx.nodes, fx.bounds).is_err());
    }

    // ── token classification ────────────────────────────────────────────

    #[test]
    fn classification_head_normalizes_and_zero_weights_give_half() {
        let mut rng = rng_from_seed(3);
        let mut g: Graph<f64> = Graph::new();
        let hidden = g.constant(vec![4, 6], rnd(&mut rng, 24));
        let w = g.constant(vec![6, 2], vec![0.0; 12]);
        let b = g.constant(vec![2], vec![0.0; 2]);
        let nodes = ClassifierNodes { w, b };
        let lp = token_classification(&mut g, hidden, &nodes, 0.0, false, &mut rng).unwrap();
        for i in 0..4 {
            let row = &g.values(lp)[i * 2..(i + 1) * 2];
            assert!(((row[0].exp() + row[1].exp()) - 1.0).abs() < 1e-12);
            assert!((row[0] - 0.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_head_single_token_scalar_oracle() {
        let mut rng = rng_from_seed(3);
        let mut g: Graph<f64> = Graph::new();
        let hidden = g.constant(vec![1, 2], vec![0.5, -2.0]);
        let w = g.constant(vec![2, 2], vec![1.0, 0.0, 0.5, -1.0]);
        let b = g.constant(vec![2], vec![0.1, -0.2]);
        let nodes = ClassifierNodes { w, b };
        let lp = token_classification(&mut g, hidden, &nodes, 0.0, false, &mut rng).unwrap();
        // relu: [0.5, 0.0]; logits: [0.5*1+0.1, 0.5*0-0.2] = [0.6, -0.2]
        let (l0, l1) = (0.6f64, -0.2f64);
        let lse = (l0.exp() + l1.exp()).ln();
        assert!((g.values(lp)[0] - (l0 - lse)).abs() < 1e-12);
        assert!((g.values(lp)[1] - (l1 - lse)).abs() < 1e-12);
    }

    // ── BiLSTM ──────────────────────────────────────────────────────────

    fn zero_bilstm(g: &mut Graph<f64>, d_in: usize, h: usize) -> BiLstmNodes {
        let mut dir = |g: &mut Graph<f64>| LstmDirNodes {
            w_x: g.constant(vec![d_in, 4 * h], vec![0.0; d_in * 4 * h]),
            w_h: g.constant(vec![h, 4 * h], vec![0.0; h * 4 * h]),
            b: g.constant(vec![4 * h], vec![0.0; 4 * h]),
        };
        BiLstmNodes {
            fwd: dir(g),
            bwd: dir(g),
        }
    }

    #[test]
    fn zeroed_bilstm_residual_is_identity() {
        let mut rng = rng_from_seed(6);
        let (n, d) = (5, 8);
        let mut g: Graph<f64> = Graph::new();
        let hidden = g.constant(vec![n, d], rnd(&mut rng, n * d));
        let l1 = zero_bilstm(&mut g, d, d / 2);
        let l2 = zero_bilstm(&mut g, d, d / 2);
        let out = bilstm_residual(&mut g, hidden, &l1, &l2, 0.0, false, &mut rng).unwrap();
        assert_eq!(g.values(out), g.values(hidden));
        assert_eq!(g.shape(out), g.shape(hidden));
    }

    #[test]
    fn lstm_step_matches_hand_unrolled_gates() {
        // 2 tokens, 1-dim input, 1 hidden unit, forward direction
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![2, 1], vec![0.5, -1.0]);
        let w_x = g.constant(vec![1, 4], vec![0.2, -0.3, 0.7, 0.4]);
        let w_h = g.constant(vec![1, 4], vec![0.1, 0.5, -0.2, 0.3]);
        let b = g.constant(vec![4], vec![0.05, -0.1, 0.0, 0.2]);
        let nodes = LstmDirNodes { w_x, w_h, b };
        let out = lstm_direction(&mut g, x, &nodes, 1, false).unwrap();

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = 0.0f64;
        let mut c = 0.0f64;
        let mut expect = Vec::new();
        for &xv in &[0.5, -1.0] {
            let zi = 0.2 * xv + 0.1 * h + 0.05;
            let zf = -0.3 * xv + 0.5 * h - 0.1;
            let zg = 0.7 * xv - 0.2 * h + 0.0;
            let zo = 0.4 * xv + 0.3 * h + 0.2;
            c = sigmoid(zf) * c + sigmoid(zi) * zg.tanh();
            h = sigmoid(zo) * c.tanh();
            expect.push(h);
        }
        for (a, b) in g.values(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilstm_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(12);
        let (n, d_in, h) = (3, 2, 2);
        let sizes = [n * d_in, d_in * 4 * h, h * 4 * h, 4 * h];
        let total: usize = sizes.iter().sum();
        let xs = rnd(&mut rng, total);
        let build = |g: &mut Graph<f64>, xs: &[f64]| -> TensorId {
            let mut off = 0;
            let mut next = |len: usize| {
                let v = xs[off..off + len].to_vec();
                off += len;
                v
            };
            let x = g.leaf(vec![n, d_in], next(sizes[0]));
            let nodes = LstmDirNodes {
                w_x: g.leaf(vec![d_in, 4 * h], next(sizes[1])),
                w_h: g.leaf(vec![h, 4 * h], next(sizes[2])),
                b: g.leaf(vec![4 * h], next(sizes[3])),
            };
            let out = lstm_direction(g, x, &nodes, h, true).unwrap();
            let coef: Vec<f64> = (0..n * h).map(|i| 0.2 + 0.15 * i as f64).collect();
            let c = g.constant(vec![n, h], coef);
            let prod = g.mul(out, c).unwrap();
            g.sum_all(prod)
        };
        let mut g: Graph<f64> = Graph::new();
        let loss = build(&mut g, &xs);
        g.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for id in 0..4 {
            analytic.extend(g.grad(id).unwrap().to_vec());
        }
        let hstep = 1e-5;
        for i in 0..total {
            let mut plus = xs.clone();
            plus[i] += hstep;
            let mut minus = xs.clone();
            minus[i] -= hstep;
            let mut gp: Graph<f64> = Graph::new();
            let lp = build(&mut gp, &plus);
            let mut gm: Graph<f64> = Graph::new();
            let lm = build(&mut gm, &minus);
            let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * hstep);
            let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
            assert!(((analytic[i] - numeric) / denom).abs() < 1e-5, "input {i}");
        }
    }

    // ── CRF ─────────────────────────────────────────────────────────────

    fn all_label_sequences(n: usize) -> Vec<Vec<usize>> {
        (0..(1usize << n))
            .map(|bits| (0..n).map(|t| (bits >> t) & 1).collect())
            .collect()
    }

    #[test]
    fn crf_score_cases() {
        // zero scores
        let e = vec![0.0f64; 6];
        let t = vec![0.0f64; 6];
        for y in all_label_sequences(3) {
            assert_eq!(crf_score(&e, &y, &t).unwrap(), 0.0);
        }

        // n=1: tau[start, y] + f[0, y]
        let e1 = vec![0.3, -0.2];
        let t1 = vec![0.0, 0.0, 0.0, 0.0, 0.5, -0.4];
        assert!((crf_score(&e1, &[0], &t1).unwrap() - 0.8).abs() < 1e-12);
        assert!((crf_score(&e1, &[1], &t1).unwrap() + 0.6).abs() < 1e-12);

        // n=3 random: term-by-term hand sum
        let mut rng = rng_from_seed(15);
        let e3 = rnd(&mut rng, 6);
        let t3 = rnd(&mut rng, 6);
        let y = [1usize, 0, 1];
        let hand = t3[4 + 1] + e3[1] + t3[2] + e3[2] + t3[1] + e3[5];
        assert!((crf_score(&e3, &y, &t3).unwrap() - hand).abs() < 1e-12);

        // label out of range
        assert!(crf_score(&e3, &[0, 2, 1], &t3).is_err());
    }

    #[test]
    fn crf_forward_matches_brute_force_and_normalizes() {
        let mut rng = rng_from_seed(23);
        for n in 1..=8usize {
            for _ in 0..4 {
                let e = rnd(&mut rng, n * 2);
                let t = rnd(&mut rng, 6);
                let mut g: Graph<f64> = Graph::new();
                let en = g.constant(vec![n, 2], e.clone());
                let tn = g.constant(vec![3, 2], t.clone());
                let logz = crf_forward_logz(&mut g, en, tn).unwrap();

                let brute: f64 = {
                    let scores: Vec<f64> = all_label_sequences(n)
                        .iter()
                        .map(|y| crf_score(&e, y, &t).unwrap())
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    mx + scores.iter().map(|s| (s - mx).exp()).sum::<f64>().ln()
                };
                assert!((g.scalar(logz) - brute).abs() < 1e-9, "n={n}");

                // probabilities over all sequences sum to one
                let mut psum = 0.0;
                for y in all_label_sequences(n) {
                    let mut g2: Graph<f64> = Graph::new();
                    let en2 = g2.constant(vec![n, 2], e.clone());
                    let tn2 = g2.constant(vec![3, 2], t.clone());
                    let lp = crf_log_prob(&mut g2, en2, &y, tn2).unwrap();
                    psum += g2.scalar(lp).exp();
                }
                assert!((psum - 1.0).abs() < 1e-9, "n={n} prob sum {psum}");
            }
        }
    }

    #[test]
    fn crf_uniform_case_gives_n_log2() {
        let n = 5;
        let e = vec![0.0f64; n * 2];
        let t = vec![0.0f64; 6];
        for y in all_label_sequences(n) {
            let mut g: Graph<f64> = Graph::new();
            let en = g.constant(vec![n, 2], e.clone());
            let tn = g.constant(vec![3, 2], t.clone());
            let lp = crf_log_prob(&mut g, en, &y, tn).unwrap();
            assert!((g.scalar(lp) + (n as f64) * 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn crf_log_prob_translation_invariant_per_position() {
        let mut rng = rng_from_seed(29);
        let n = 4;
        let e = rnd(&mut rng, n * 2);
        let t = rnd(&mut rng, 6);
        let mut shifted = e.clone();
        shifted[2 * 2] += 7.25; // add a constant to every emission at position 2
        shifted[2 * 2 + 1] += 7.25;
        for y in all_label_sequences(n) {
            let mut g: Graph<f64> = Graph::new();
            let en = g.constant(vec![n, 2], e.clone());
            let tn = g.constant(vec![3, 2], t.clone());
            let a = crf_log_prob(&mut g, en, &y, tn).unwrap();
            let en2 = g.constant(vec![n, 2], shifted.clone());
            let b = crf_log_prob(&mut g, en2, &y, tn).unwrap();
            assert!((g.scalar(a) - g.scalar(b)).abs() < 1e-9);
        }
    }

    #[test]
    fn viterbi_cases() {
        // n=1: argmax of tau[start, .] + f[0, .]
        let e = vec![0.1f64, 0.3];
        let t = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let (y, s) = viterbi_decode(&e, &t);
        assert_eq!(y, vec![0]);
        assert!((s - 1.1).abs() < 1e-12);

        // tau = 0: per-position argmax
        let e2 = vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4];
        let z = vec![0.0f64; 6];
        let (y2, _) = viterbi_decode(&e2, &z);
        assert_eq!(y2, vec![0, 1, 0]);

        // all ties -> lexicographically smallest
        let (y3, s3) = viterbi_decode(&[0.0f64; 8], &z);
        assert_eq!(y3, vec![0, 0, 0, 0]);
        assert_eq!(s3, 0.0);

        // empty sequence
        let (y0, s0) = viterbi_decode::<f64>(&[], &z);
        assert!(y0.is_empty());
        assert_eq!(s0, 0.0);
    }

    #[test]
    fn viterbi_matches_brute_force_argmax() {
        let mut rng = rng_from_seed(31);
        for n in 1..=8usize {
            for _ in 0..4 {
                let e = rnd(&mut rng, n * 2);
                let t = rnd(&mut rng, 6);
                let (y, s) = viterbi_decode(&e, &t);
                assert!((crf_score(&e, &y, &t).unwrap() - s).abs() < 1e-12);
                let best = all_label_sequences(n)
                    .into_iter()
                    .map(|cand| {
                        let sc = crf_score(&e, &cand, &t).unwrap();
                        (cand, sc)
                    })
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| b.0.cmp(&a.0)))
                    .unwrap();
                assert_eq!(y, best.0, "n={n}");
                // viterbi score dominates every sequence's score
                for cand in all_label_sequences(n) {
                    assert!(crf_score(&e, &cand, &t).unwrap() <= s + 1e-12);
                }
            }
        }
    }

    #[test]
    fn crf_marginals_match_enumeration() {
        let mut rng = rng_from_seed(37);
        let n = 5;
        let e = rnd(&mut rng, n * 2);
        let t = rnd(&mut rng, 6);
        let marg = crf_marginals(&e, &t);
        let seqs = all_label_sequences(n);
        let scores: Vec<f64> = seqs.iter().map(|y| crf_score(&e, y, &t).unwrap()).collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        for t_pos in 0..n {
            let p: f64 = seqs
                .iter()
                .zip(&scores)
                .filter(|(y, _)| y[t_pos] == 1)
                .map(|(_, s)| (s - mx).exp())
                .sum::<f64>()
                / z;
            assert!((marg[t_pos] - p).abs() < 1e-9, "position {t_pos}");
        }
    }

    #[test]
    fn crf_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(41);
        let n = 4;
        let labels = vec![0usize, 1, 1, 0];
        let total = n * 2 + 6;
        let xs = rnd(&mut rng, total);
        let build = |g: &mut Graph<f64>, xs: &[f64]| -> TensorId {
            let e = g.leaf(vec![n, 2], xs[..n * 2].to_vec());
            let t = g.leaf(vec![3, 2], xs[n * 2..].to_vec());
            let lp = crf_log_prob(g, e, &labels, t).unwrap();
            g.scale(lp, -1.0)
        };
        let mut g: Graph<f64> = Graph::new();
        let loss = build(&mut g, &xs);
        g.backward(loss).unwrap();
        let mut analytic: Vec<f64> = Vec::new();
        analytic.extend(g.grad(0).unwrap());
        analytic.extend(g.grad(1).unwrap());
        let h = 1e-5;
        for i in 0..total {
            let mut plus = xs.clone();
            plus[i] += h;
            let mut minus = xs.clone();
            minus[i] -= h;
            let mut gp: Graph<f64> = Graph::new();
            let lp = build(&mut gp, &plus);
            let mut gm: Graph<f64> = Graph::new();
            let lm = build(&mut gm, &minus);
            let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
            let denom: f64 = analytic[i].abs().max(numeric.abs()).max(1.0);
            assert!(((analytic[i] - numeric) / denom).abs() < 1e-5, "input {i}");
        }
    }
}
