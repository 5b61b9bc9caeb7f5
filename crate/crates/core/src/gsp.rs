//! Graph signals, shift operators and graph filters.
//!
//! A graph signal is an `N x F` matrix whose row `i` holds the features of
//! agent `i`. Multiplying by the shift operator `S` is one round of
//! communication: row `i` of `S X` only mixes rows of `X` belonging to the
//! neighbors of `i`. Every filter here is evaluated by repeated shifts so the
//! computation maps one-to-one onto local exchanges.

use std::collections::{BTreeSet, VecDeque};

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{invalid, Error, Result};

/// An `N x F` real matrix, one feature row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSignal {
    data: Array2<f64>,
}

impl GraphSignal {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let cols = data.ncols().max(1);
            return invalid(format!(
                "graph signal entry ({}, {}) is not finite",
                pos / cols,
                pos % cols
            ));
        }
        Ok(Self { data })
    }

    pub fn zeros(nodes: usize, features: usize) -> Self {
        Self {
            data: Array2::zeros((nodes, features)),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let f = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != f) {
            return invalid("ragged rows in graph signal");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((n, f), flat).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::new(data)
    }

    pub fn nodes(&self) -> usize {
        self.data.nrows()
    }

    pub fn features(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Wraps a matrix produced by internal arithmetic on finite inputs.
    pub(crate) fn from_trusted(data: Array2<f64>) -> Self {
        Self { data }
    }
}

/// Symmetric support matrix of an undirected communication graph.
///
/// The concrete choice throughout is the binary adjacency matrix, but any
/// symmetric matrix whose off-diagonal zero pattern matches the non-edges
/// is accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOperator {
    matrix: Array2<f64>,
    edge_count: usize,
}

impl ShiftOperator {
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self> {
        let (n, m) = matrix.dim();
        if n != m {
            return invalid(format!("shift operator must be square, got {n}x{m}"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return invalid("shift operator has non-finite entries");
        }
        let mut edge_count = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if matrix[[i, j]] != matrix[[j, i]] {
                    return invalid(format!("shift operator is not symmetric at ({i}, {j})"));
                }
                if matrix[[i, j]] != 0.0 {
                    edge_count += 1;
                }
            }
        }
        Ok(Self { matrix, edge_count })
    }

    /// Binary adjacency matrix of the undirected edge list.
    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut matrix = Array2::zeros((nodes, nodes));
        for &(i, j) in edges {
            if i >= nodes || j >= nodes {
                return invalid(format!("edge ({i}, {j}) out of range for {nodes} nodes"));
            }
            if i == j {
                return invalid(format!("self loop at node {i}"));
            }
            matrix[[i, j]] = 1.0;
            matrix[[j, i]] = 1.0;
        }
        Self::from_matrix(matrix)
    }

    pub fn zeros(nodes: usize) -> Self {
        Self {
            matrix: Array2::zeros((nodes, nodes)),
            edge_count: 0,
        }
    }

    pub fn nodes(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.nodes();
        let mut out = Vec::with_capacity(self.edge_count);
        for i in 0..n {
            for j in (i + 1)..n {
                if self.matrix[[i, j]] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Neighbors of `i`, excluding `i` itself.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.matrix
            .row(i)
            .into_iter()
            .enumerate()
            .filter(move |&(j, &w)| j != i && w != 0.0)
            .map(|(j, _)| j)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// True when every node can reach every other node.
    pub fn is_connected(&self) -> bool {
        let n = self.nodes();
        if n <= 1 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut reached = 1;
        while let Some(i) = queue.pop_front() {
            for j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    reached += 1;
                    queue.push_back(j);
                }
            }
        }
        reached == n
    }
}

/// Ordered filter taps `[H_0, ..., H_K]`, each `F_in x F_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTaps {
    taps: Vec<Array2<f64>>,
}

impl FilterTaps {
    pub fn new(taps: Vec<Array2<f64>>) -> Result<Self> {
        let Some(first) = taps.first() else {
            return invalid("filter needs at least one tap");
        };
        let shape = first.dim();
        if taps.iter().any(|h| h.dim() != shape) {
            return invalid("filter taps must share one shape");
        }
        if taps.iter().flat_map(|h| h.iter()).any(|v| !v.is_finite()) {
            return invalid("filter taps contain non-finite values");
        }
        Ok(Self { taps })
    }

    pub fn zeros(order: usize, f_in: usize, f_out: usize) -> Self {
        Self {
            taps: vec![Array2::zeros((f_in, f_out)); order + 1],
        }
    }

    /// Hop order `K`.
    pub fn order(&self) -> usize {
        self.taps.len() - 1
    }

    pub fn f_in(&self) -> usize {
        self.taps[0].nrows()
    }

    pub fn f_out(&self) -> usize {
        self.taps[0].ncols()
    }

    pub fn taps(&self) -> &[Array2<f64>] {
        &self.taps
    }

    pub fn tap(&self, k: usize) -> &Array2<f64> {
        &self.taps[k]
    }

    pub(crate) fn taps_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.taps
    }

    /// Number of scalar coefficients.
    pub fn len(&self) -> usize {
        self.taps.len() * self.f_in() * self.f_out()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_pair(s: &ShiftOperator, x: &GraphSignal) -> Result<()> {
    if s.nodes() != x.nodes() {
        return invalid(format!(
            "shift operator has {} nodes but signal has {}",
            s.nodes(),
            x.nodes()
        ));
    }
    Ok(())
}

/// One communication round: `S X`.
pub fn shift(s: &ShiftOperator, x: &GraphSignal) -> Result<GraphSignal> {
    check_pair(s, x)?;
    Ok(GraphSignal::from_trusted(s.matrix.dot(&x.data)))
}

/// Static graph filter `sum_k S^k X H_k`, evaluated by repeated shifts.
pub fn apply_filter(s: &ShiftOperator, x: &GraphSignal, h: &FilterTaps) -> Result<GraphSignal> {
    check_pair(s, x)?;
    if x.features() != h.f_in() {
        return invalid(format!(
            "signal has {} features but taps expect {}",
            x.features(),
            h.f_in()
        ));
    }
    let mut diffused = x.data.clone();
    let mut out = diffused.dot(h.tap(0));
    for k in 1..=h.order() {
        diffused = s.matrix.dot(&diffused);
        out += &diffused.dot(h.tap(k));
    }
    Ok(GraphSignal::from_trusted(out))
}

/// Static graph filter computed node by node.
///
/// Every node keeps only its own current value and, at each of the `K`
/// rounds, reads the values its neighbors sent in the previous round. The
/// dense product is never formed.
pub fn apply_filter_message_passing(s: &ShiftOperator, x: &GraphSignal, h: &FilterTaps) -> Result<GraphSignal> {
    check_pair(s, x)?;
    if x.features() != h.f_in() {
        return invalid("signal width does not match taps");
    }
    let n = x.nodes();
    let f_in = h.f_in();
    let f_out = h.f_out();
    let neighbor_lists: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| s.matrix[[i, j]] != 0.0)
                .map(|j| (j, s.matrix[[i, j]]))
                .collect()
        })
        .collect();

    let mut messages: Vec<Vec<f64>> = (0..n).map(|i| x.data.row(i).to_vec()).collect();
    let mut accum = vec![vec![0.0; f_out]; n];
    for k in 0..=h.order() {
        if k > 0 {
            let previous = messages.clone();
            for (i, msg) in messages.iter_mut().enumerate() {
                msg.iter_mut().for_each(|v| *v = 0.0);
                for &(j, w) in &neighbor_lists[i] {
                    for (m, p) in msg.iter_mut().zip(&previous[j]) {
                        *m += w * p;
                    }
                }
            }
        }
        let tap = h.tap(k);
        for i in 0..n {
            for g in 0..f_out {
                let mut acc = 0.0;
                for f in 0..f_in {
                    acc += messages[i][f] * tap[[f, g]];
                }
                accum[i][g] += acc;
            }
        }
    }
    GraphSignal::from_rows(&accum)
}

/// Ring buffer of `(S(t-k), X(t-k))` for `k = 0..depth`.
///
/// Entries older than the trajectory start are absent and act as zero
/// signals on zero graphs.
#[derive(Debug, Clone)]
pub struct GraphHistory {
    depth: usize,
    // newest first
    entries: VecDeque<(ShiftOperator, GraphSignal)>,
    pushed: usize,
}

impl GraphHistory {
    /// History able to feed a filter of order `depth - 1`.
    pub fn new(depth: usize) -> Self {
        Self {
            depth: depth.max(1),
            entries: VecDeque::with_capacity(depth.max(1)),
            pushed: 0,
        }
    }

    pub fn for_order(order: usize) -> Self {
        Self::new(order + 1)
    }

    pub fn push(&mut self, s: ShiftOperator, x: GraphSignal) -> Result<()> {
        check_pair(&s, &x)?;
        if let Some((_, newest)) = self.entries.front() {
            if newest.nodes() != x.nodes() || newest.features() != x.features() {
                return invalid(format!(
                    "history holds {}x{} signals, got {}x{}",
                    newest.nodes(),
                    newest.features(),
                    x.nodes(),
                    x.features()
                ));
            }
        }
        if self.entries.len() == self.depth {
            self.entries.pop_back();
        }
        self.entries.push_front((s, x));
        self.pushed += 1;
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of pushes; the time index of the next entry.
    pub fn clock(&self) -> usize {
        self.pushed
    }

    /// Entry `k` steps back from the newest one, if still held.
    pub fn get(&self, k: usize) -> Option<(&ShiftOperator, &GraphSignal)> {
        self.entries.get(k).map(|(s, x)| (s, x))
    }

    pub fn latest(&self) -> Option<(&ShiftOperator, &GraphSignal)> {
        self.get(0)
    }

    pub fn nodes(&self) -> Option<usize> {
        self.latest().map(|(_, x)| x.nodes())
    }

    pub fn features(&self) -> Option<usize> {
        self.latest().map(|(_, x)| x.features())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ShiftOperator, &GraphSignal)> {
        self.entries.iter().map(|(s, x)| (s, x))
    }
}

/// Unit-delay filter `sum_k S(t) ... S(t-k+1) X(t-k) H_k`.
///
/// The `k`-th term travels `k` hops and arrives `k` steps late: the signal
/// from `t-k` is shifted first by `S(t-k+1)` and last by `S(t)`.
pub fn apply_delayed_filter(hist: &GraphHistory, h: &FilterTaps) -> Result<GraphSignal> {
    let Some((_, newest)) = hist.latest() else {
        return invalid("delayed filter needs a nonempty history");
    };
    if newest.features() != h.f_in() {
        return invalid(format!(
            "history has {} features but taps expect {}",
            newest.features(),
            h.f_in()
        ));
    }
    let mut out = Array2::zeros((newest.nodes(), h.f_out()));
    for k in 0..=h.order() {
        let Some((_, past)) = hist.get(k) else {
            break;
        };
        // Multiply by the tap first when it narrows the signal.
        let mut term = if h.f_out() < h.f_in() {
            past.data.dot(h.tap(k))
        } else {
            past.data.clone()
        };
        for j in (0..k).rev() {
            let (s, _) = hist.get(j).expect("newer entries exist");
            term = s.matrix.dot(&term);
        }
        if h.f_out() < h.f_in() {
            out += &term;
        } else {
            out += &term.dot(h.tap(k));
        }
    }
    Ok(GraphSignal::from_trusted(out))
}

/// A bijection of `{0, ..., N-1}`.
///
/// Acting on a signal, row `i` of the result is row `perm[i]` of the input;
/// in matrix form this is `P^T X` with `P[perm[i], i] = 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    perm: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return invalid(format!("{perm:?} is not a permutation"));
            }
            seen[p] = true;
        }
        Ok(Self { perm })
    }

    pub fn identity(n: usize) -> Self {
        Self { perm: (0..n).collect() }
    }

    pub fn random<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        Self { perm }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        Self { perm: inv }
    }

    /// Dense matrix `P` such that `P^T X` equals [`Permutation::rows`].
    pub fn to_matrix(&self) -> Array2<f64> {
        let n = self.perm.len();
        let mut p = Array2::zeros((n, n));
        for (i, &src) in self.perm.iter().enumerate() {
            p[[src, i]] = 1.0;
        }
        p
    }

    /// `P^T A` for any matrix with `N` rows.
    pub fn rows(&self, a: &Array2<f64>) -> Array2<f64> {
        a.select(Axis(0), &self.perm)
    }

    /// `P^T A P` for an `N x N` matrix.
    pub fn conjugate(&self, a: &Array2<f64>) -> Array2<f64> {
        a.select(Axis(0), &self.perm).select(Axis(1), &self.perm)
    }

    pub fn signal(&self, x: &GraphSignal) -> Result<GraphSignal> {
        if x.nodes() != self.len() {
            return invalid("permutation length does not match the signal");
        }
        Ok(GraphSignal::from_trusted(self.rows(&x.data)))
    }

    pub fn shift_operator(&self, s: &ShiftOperator) -> Result<ShiftOperator> {
        if s.nodes() != self.len() {
            return invalid("permutation length does not match the shift operator");
        }
        Ok(ShiftOperator {
            matrix: self.conjugate(&s.matrix),
            edge_count: s.edge_count,
        })
    }

    pub fn history(&self, hist: &GraphHistory) -> Result<GraphHistory> {
        let mut out = GraphHistory::new(hist.depth);
        for (s, x) in hist.entries.iter().rev() {
            out.push(self.shift_operator(s)?, self.signal(x)?)?;
        }
        out.pushed = hist.pushed;
        Ok(out)
    }
}

/// Relabels a signal and its graph consistently: `(P^T X, P^T S P)`.
pub fn permute(p: &Permutation, x: &GraphSignal, s: &ShiftOperator) -> Result<(GraphSignal, ShiftOperator)> {
    check_pair(s, x)?;
    Ok((p.signal(x)?, p.shift_operator(s)?))
}

/// Nodes within `k` hops of `i`, including `i`.
pub fn khop_mask(s: &ShiftOperator, i: usize, k: usize) -> Result<BTreeSet<usize>> {
    if i >= s.nodes() {
        return invalid(format!("node {i} out of range for {} nodes", s.nodes()));
    }
    let mut reached = BTreeSet::from([i]);
    let mut frontier = vec![i];
    for _ in 0..k {
        let mut next = Vec::new();
        for &u in &frontier {
            for v in s.neighbors(u) {
                if reached.insert(v) {
                    next.push(v);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Ok(reached)
}

/// Nodes whose value at `t-k` reaches `i` by time `t` through the delayed
/// exchanges of a history, for some `k <= order`.
///
/// Returned as one node set per lag: entry `k` lists the nodes of
/// `X(t-k)` that can influence row `i` of a unit-delay filter of the given
/// order.
pub fn delayed_reach(hist: &GraphHistory, i: usize, order: usize) -> Result<Vec<BTreeSet<usize>>> {
    let Some(n) = hist.nodes() else {
        return invalid("empty history");
    };
    if i >= n {
        return invalid(format!("node {i} out of range for {n} nodes"));
    }
    let mut out = Vec::with_capacity(order + 1);
    let mut current = BTreeSet::from([i]);
    out.push(current.clone());
    for k in 1..=order {
        // S(t-k+1) links lag k-1 to lag k
        let Some((s, _)) = hist.get(k - 1) else {
            break;
        };
        let mut next = BTreeSet::new();
        for &u in &current {
            next.extend(s.neighbors(u));
            if s.matrix[[u, u]] != 0.0 {
                next.insert(u);
            }
        }
        out.push(next.clone());
        current = next;
    }
    Ok(out)
}

/// Binary disk graph: `i ~ j` iff `i != j` and `|r_i - r_j| <= radius`.
pub fn build_disk_graph(positions: ArrayView2<'_, f64>, radius: f64) -> Result<ShiftOperator> {
    if positions.ncols() != 2 {
        return invalid(format!("positions must be N x 2, got {:?}", positions.dim()));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return invalid(format!("radius must be positive, got {radius}"));
    }
    if positions.iter().any(|v| !v.is_finite()) {
        return invalid("positions contain non-finite values");
    }
    let n = positions.nrows();
    let r2 = radius * radius;
    let mut matrix = Array2::zeros((n, n));
    let mut edge_count = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = positions[[i, 0]] - positions[[j, 0]];
            let dy = positions[[i, 1]] - positions[[j, 1]];
            if dx * dx + dy * dy <= r2 {
                matrix[[i, j]] = 1.0;
                matrix[[j, i]] = 1.0;
                edge_count += 1;
            }
        }
    }
    Ok(ShiftOperator { matrix, edge_count })
}
