//! Static k-d tree over fixed-dimension `f64` vectors, Euclidean metric.

const LEAF_SIZE: usize = 8;

#[derive(Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug)]
pub(crate) struct KdTree {
    dim: usize,
    /// Point coordinates, permuted into tree order.
    coords: Vec<f64>,
    /// Caller ids, in tree order.
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

/// A neighbor: squared distance and caller id.
pub(crate) type Neighbor = (f64, usize);

impl KdTree {
    pub(crate) fn empty(dim: usize) -> Self {
        Self {
            dim,
            coords: Vec::new(),
            ids: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Builds over `(id, point)` pairs; every point must have length `dim`.
    pub(crate) fn build<'a>(dim: usize, points: impl IntoIterator<Item = (usize, &'a [f64])>) -> Self {
        let mut ids = Vec::new();
        let mut flat = Vec::new();
        for (id, p) in points {
            debug_assert_eq!(p.len(), dim);
            ids.push(id);
            flat.extend_from_slice(p);
        }
        let mut tree = Self::empty(dim);
        if ids.is_empty() {
            return tree;
        }
        let mut order: Vec<u32> = (0..ids.len() as u32).collect();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for row in flat.chunks_exact(dim) {
            for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(row) {
                *l = l.min(v);
                *h = h.max(v);
            }
        }
        tree.build_rec(&flat, &mut order, 0, &mut lo, &mut hi);
        tree.coords.reserve(flat.len());
        for &i in &order {
            let i = i as usize;
            tree.ids.push(ids[i]);
            tree.coords.extend_from_slice(&flat[i * dim..(i + 1) * dim]);
        }
        tree
    }

    /// `order` is the window of the permutation starting at `offset`; `lo` and
    /// `hi` bound it, tightened only along split dimensions.
    fn build_rec(&mut self, flat: &[f64], order: &mut [u32], offset: usize, lo: &mut [f64], hi: &mut [f64]) -> usize {
        let id = self.nodes.len();
        if order.len() <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                start: offset,
                end: offset + order.len(),
            });
            return id;
        }
        let n = self.dim;
        let mut dim = 0;
        for d in 1..n {
            if hi[d] - lo[d] > hi[dim] - lo[dim] {
                dim = d;
            }
        }
        let mid = order.len() / 2;
        let mut keyed: Vec<(f64, u32)> = order.iter().map(|&i| (flat[i as usize * n + dim], i)).collect();
        keyed.select_nth_unstable_by(mid, |a, b| a.0.total_cmp(&b.0));
        let value = keyed[mid].0;
        for (o, (_, i)) in order.iter_mut().zip(keyed) {
            *o = i;
        }
        self.nodes.push(Node::Split {
            dim,
            value,
            left: 0,
            right: 0,
        });
        let (left_half, right_half) = order.split_at_mut(mid);
        let saved = hi[dim];
        hi[dim] = value;
        let left = self.build_rec(flat, left_half, offset, lo, hi);
        hi[dim] = saved;
        let saved = lo[dim];
        lo[dim] = value;
        let right = self.build_rec(flat, right_half, offset + mid, lo, hi);
        lo[dim] = saved;
        if let Node::Split { left: l, right: r, .. } = &mut self.nodes[id] {
            *l = left;
            *r = right;
        }
        id
    }

    pub(crate) fn len(&self) -> usize {
        self.ids.len()
    }

    fn point(&self, slot: usize) -> &[f64] {
        &self.coords[slot * self.dim..(slot + 1) * self.dim]
    }

    /// The `k` nearest points accepted by `keep`, ordered by
    /// `(squared distance, id)`.
    pub(crate) fn knn(&self, query: &[f64], k: usize, keep: impl Fn(usize) -> bool) -> Vec<Neighbor> {
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k == 0 || self.nodes.is_empty() {
            return best;
        }
        let mut offsets = vec![0.0; self.dim];
        self.search(0, query, k, &keep, &mut offsets, &mut best);
        best
    }

    /// `offsets[d]` is the query's distance to the current cell along `d`.
    fn search(
        &self,
        node: usize,
        query: &[f64],
        k: usize,
        keep: &impl Fn(usize) -> bool,
        offsets: &mut [f64],
        best: &mut Vec<Neighbor>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let id = self.ids[slot];
                    if !keep(id) {
                        continue;
                    }
                    let d: f64 = self
                        .point(slot)
                        .iter()
                        .zip(query)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    push_bounded(best, k, (d, id));
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, keep, offsets, best);
                let saved = offsets[dim];
                offsets[dim] = diff.abs();
                // Summed in the same order as point distances, so it never
                // rounds above the distance of a point in the far cell.
                let bound: f64 = offsets.iter().map(|o| o * o).sum();
                if best.len() < k || bound <= best[best.len() - 1].0 {
                    self.search(far, query, k, keep, offsets, best);
                }
                offsets[dim] = saved;
            }
        }
    }
}

pub(crate) fn push_bounded(best: &mut Vec<Neighbor>, k: usize, cand: Neighbor) {
    let pos = best.partition_point(|&(d, id)| (d, id) < cand);
    if pos >= k {
        return;
    }
    best.insert(pos, cand);
    best.truncate(k);
}
