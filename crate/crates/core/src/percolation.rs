//! Level sets of a field sample, nearest-neighbour connectivity by
//! union-find, and the disconnection event between two site sets.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gff::FieldSample;
use crate::lattice::SiteSet;

const NONE: u32 = u32::MAX;

/// Nearest-neighbour adjacency of a window, by site index.
#[derive(Clone, Debug)]
pub struct WindowGraph {
    window: Arc<SiteSet>,
    deg: usize,
    nbrs: Vec<u32>,
}

impl WindowGraph {
    pub fn new(window: Arc<SiteSet>) -> Self {
        let deg = 2 * window.dim().unwrap_or(3);
        let mut nbrs = vec![NONE; window.len() * deg];
        for (i, p) in window.iter().enumerate() {
            for (k, q) in p.neighbors().enumerate() {
                if let Some(j) = window.position(&q) {
                    nbrs[i * deg + k] = j as u32;
                }
            }
        }
        WindowGraph { window, deg, nbrs }
    }

    pub fn window(&self) -> &Arc<SiteSet> {
        &self.window
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.nbrs[i * self.deg..(i + 1) * self.deg]
            .iter()
            .filter(|j| **j != NONE)
            .map(|j| *j as usize)
    }
}

/// `{x : φ_x ≥ α}` on a window.
#[derive(Clone, Debug)]
pub struct LevelSetMask {
    pub window: Arc<SiteSet>,
    pub mask: Vec<bool>,
    pub level: f64,
}

impl LevelSetMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|b| **b).count()
    }

    /// CSV `x0,..,open` for diagnostics.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.window.dim().unwrap_or(0);
        let cols: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},open", cols.join(","))?;
        for (p, b) in self.window.iter().zip(&self.mask) {
            let c: Vec<String> = p.coords().iter().map(|c| c.to_string()).collect();
            writeln!(w, "{},{}", c.join(","), *b as u8)?;
        }
        Ok(())
    }
}

pub fn level_set(phi: &FieldSample, alpha: f64) -> LevelSetMask {
    LevelSetMask {
        window: phi.window.clone(),
        mask: phi.values.iter().map(|v| *v >= alpha).collect(),
        level: alpha,
    }
}

/// Disjoint-set forest with union by rank and path halving.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind { parent: (0..n as u32).collect(), rank: vec![0; n] }
    }

    pub fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] as usize != i {
            let p = self.parent[i] as usize;
            self.parent[i] = self.parent[p];
            i = self.parent[i] as usize;
        }
        i
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb as u32,
            std::cmp::Ordering::Greater => self.parent[rb] = ra as u32,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra as u32;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Connected components of the open sites of a mask.
pub struct ConnectivityIndex {
    uf: UnionFind,
    mask: Vec<bool>,
}

impl ConnectivityIndex {
    pub fn new(graph: &WindowGraph, mask: &[bool]) -> Self {
        let mut uf = UnionFind::new(mask.len());
        for i in 0..mask.len() {
            if mask[i] {
                for j in graph.neighbors(i) {
                    if j > i && mask[j] {
                        uf.union(i, j);
                    }
                }
            }
        }
        ConnectivityIndex { uf, mask: mask.to_vec() }
    }

    /// Root of the component of site `i`, or `None` for a closed site.
    pub fn root(&mut self, i: usize) -> Option<usize> {
        if self.mask[i] {
            Some(self.uf.find(i))
        } else {
            None
        }
    }

    pub fn connected(&mut self, i: usize, j: usize) -> bool {
        match (self.root(i), self.root(j)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }
}

fn indices(window: &SiteSet, set: &SiteSet) -> Result<Vec<usize>> {
    set.iter()
        .map(|x| window.position(x).ok_or_else(|| LabError::OutsideDomain(format!("{x} not in window"))))
        .collect()
}

/// The disconnection event: no open nearest-neighbour path joins `a` to `s`.
pub fn is_disconnected(phi: &FieldSample, alpha: f64, a: &SiteSet, s: &SiteSet) -> Result<bool> {
    let graph = WindowGraph::new(phi.window.clone());
    Disconnection::new(&graph, a, s)?.check(phi, alpha)
}

/// Precomputed index sets for repeated disconnection checks on one window.
pub struct Disconnection<'g> {
    graph: &'g WindowGraph,
    a: Vec<usize>,
    s: Vec<usize>,
}

impl<'g> Disconnection<'g> {
    pub fn new(graph: &'g WindowGraph, a: &SiteSet, s: &SiteSet) -> Result<Self> {
        if a.intersects(s) {
            return Err(LabError::invalid("the two sets overlap"));
        }
        Ok(Disconnection { graph, a: indices(graph.window(), a)?, s: indices(graph.window(), s)? })
    }

    pub fn check(&self, phi: &FieldSample, alpha: f64) -> Result<bool> {
        if phi.window.len() != self.graph.window().len() {
            return Err(LabError::invalid("sample lives on a different window"));
        }
        let mask: Vec<bool> = phi.values.iter().map(|v| *v >= alpha).collect();
        Ok(self.check_mask(&mask))
    }

    pub fn check_mask(&self, mask: &[bool]) -> bool {
        let mut ci = ConnectivityIndex::new(self.graph, mask);
        let roots: std::collections::HashSet<usize> = self.a.iter().filter_map(|&i| ci.root(i)).collect();
        !self.s.iter().any(|&j| ci.root(j).is_some_and(|r| roots.contains(&r)))
    }
}

/// Size and `l^∞` diameter of one open component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentStat {
    pub size: usize,
    pub diameter: i32,
}

/// Components sorted by decreasing size, then decreasing diameter.
pub fn component_stats(mask: &LevelSetMask) -> Vec<ComponentStat> {
    let graph = WindowGraph::new(mask.window.clone());
    component_stats_on(&graph, &mask.mask)
}

pub fn component_stats_on(graph: &WindowGraph, mask: &[bool]) -> Vec<ComponentStat> {
    let mut ci = ConnectivityIndex::new(graph, mask);
    let sites = graph.window().sites();
    let d = graph.window().dim().unwrap_or(0);
    let mut acc: std::collections::HashMap<usize, (usize, [i32; 4], [i32; 4])> = Default::default();
    for (i, p) in sites.iter().enumerate() {
        if let Some(r) = ci.root(i) {
            let e = acc.entry(r).or_insert((0, [i32::MAX; 4], [i32::MIN; 4]));
            e.0 += 1;
            for k in 0..d {
                e.1[k] = e.1[k].min(p.coord(k));
                e.2[k] = e.2[k].max(p.coord(k));
            }
        }
    }
    let mut out: Vec<ComponentStat> = acc
        .into_values()
        .map(|(size, lo, hi)| ComponentStat { size, diameter: (0..d).map(|k| hi[k] - lo[k]).max().unwrap_or(0) })
        .collect();
    out.sort_by(|a, b| b.size.cmp(&a.size).then(b.diameter.cmp(&a.diameter)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{IntBox, Point};
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn window(r: i32) -> Arc<SiteSet> {
        Arc::new(SiteSet::from_box(&IntBox::ball(Point::origin(3), r)))
    }

    fn bfs_disconnected(w: &SiteSet, mask: &[bool], a: &SiteSet, s: &SiteSet) -> bool {
        let mut seen = vec![false; w.len()];
        let mut q = VecDeque::new();
        for x in a.iter() {
            let i = w.position(x).unwrap();
            if mask[i] {
                seen[i] = true;
                q.push_back(*x);
            }
        }
        while let Some(x) = q.pop_front() {
            if s.contains(&x) {
                return false;
            }
            for y in x.neighbors() {
                if let Some(j) = w.position(&y) {
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        q.push_back(y);
                    }
                }
            }
        }
        true
    }

    #[test]
    fn trivial_level_sets() {
        let w = window(2);
        let phi = FieldSample::from_fn(w.clone(), |p| p.coord(0) as f64);
        assert_eq!(level_set(&phi, -10.0).count(), w.len());
        assert_eq!(level_set(&phi, 10.0).count(), 0);
        let a = SiteSet::from_points(vec![Point::origin(3)]).unwrap();
        let s = SiteSet::from_points(w.iter().filter(|p| p.norm_inf() == 2).copied().collect()).unwrap();
        assert!(is_disconnected(&phi, 10.0, &a, &s).unwrap());
        assert!(!is_disconnected(&phi, -10.0, &a, &s).unwrap());
        assert!(is_disconnected(&phi, 0.0, &a, &a).is_err());
    }

    #[test]
    fn blocking_slab_disconnects() {
        let w = window(3);
        let phi = FieldSample::from_fn(w.clone(), |p| if p.coord(0) == 1 { -1.0 } else { 1.0 });
        let a = SiteSet::from_points(vec![Point::origin(3)]).unwrap();
        let s = SiteSet::from_points(vec![Point::new(&[3, 0, 0]).unwrap()]).unwrap();
        assert!(is_disconnected(&phi, 0.0, &a, &s).unwrap());
        let s2 = SiteSet::from_points(vec![Point::new(&[-3, 0, 0]).unwrap()]).unwrap();
        assert!(!is_disconnected(&phi, 0.0, &a, &s2).unwrap());
    }

    #[test]
    fn component_stats_cases() {
        let w = window(2);
        let empty = LevelSetMask { window: w.clone(), mask: vec![false; w.len()], level: 0.0 };
        assert!(component_stats(&empty).is_empty());
        let mut one = empty.clone();
        one.mask[7] = true;
        assert_eq!(component_stats(&one), vec![ComponentStat { size: 1, diameter: 0 }]);
        let full = LevelSetMask { window: w.clone(), mask: vec![true; w.len()], level: 0.0 };
        assert_eq!(component_stats(&full), vec![ComponentStat { size: 125, diameter: 4 }]);
    }

    #[test]
    fn union_find_matches_bfs_on_random_fields() {
        use rand::Rng;
        let w = window(3);
        let graph = WindowGraph::new(w.clone());
        let a = SiteSet::from_box(&IntBox::ball(Point::origin(3), 1));
        let s = SiteSet::from_points(w.iter().filter(|p| p.norm_inf() == 3).copied().collect()).unwrap();
        let dc = Disconnection::new(&graph, &a, &s).unwrap();
        let mut rng = crate::mc::stream_rng(17, 0);
        let mut both = [0; 2];
        for _ in 0..300 {
            let p: f64 = rng.gen_range(0.2..0.5);
            let mask: Vec<bool> = (0..w.len()).map(|_| rng.gen::<f64>() < p).collect();
            let got = dc.check_mask(&mask);
            assert_eq!(got, bfs_disconnected(&w, &mask, &a, &s));
            both[got as usize] += 1;
        }
        assert!(both[0] > 10 && both[1] > 10, "{both:?}");
    }

    proptest! {
        #[test]
        fn disconnection_monotone_in_level(seed in 0u64..1000, lo in -1.0f64..0.0, hi in 0.0f64..1.0) {
            let w = window(2);
            let mut rng = crate::mc::stream_rng(seed, 0);
            let values: Vec<f64> = (0..w.len()).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
            let phi = FieldSample::from_values(w.clone(), values).unwrap();
            let a = SiteSet::from_points(vec![Point::origin(3)]).unwrap();
            let s = SiteSet::from_points(w.iter().filter(|p| p.norm_inf() == 2).copied().collect()).unwrap();
            let m_lo = level_set(&phi, lo);
            let m_hi = level_set(&phi, hi);
            for (x, y) in m_hi.mask.iter().zip(&m_lo.mask) {
                prop_assert!(!*x || *y);
            }
            if !is_disconnected(&phi, hi, &a, &s).unwrap() {
                prop_assert!(!is_disconnected(&phi, lo, &a, &s).unwrap());
            }
        }

        #[test]
        fn result_independent_of_site_order(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::Rng;
            let w = window(2);
            let mut rng = crate::mc::stream_rng(seed, 1);
            let mask: Vec<bool> = (0..w.len()).map(|_| rng.gen::<f64>() < 0.35).collect();
            let graph = WindowGraph::new(w.clone());
            let base = component_stats_on(&graph, &mask);
            // Union order permuted: rebuild the forest from shuffled edges.
            let mut edges: Vec<(usize, usize)> = (0..w.len())
                .flat_map(|i| graph.neighbors(i).filter(move |j| *j > i).map(move |j| (i, j)))
                .filter(|(i, j)| mask[*i] && mask[*j])
                .collect();
            edges.shuffle(&mut rng);
            let mut uf = UnionFind::new(w.len());
            for (i, j) in edges {
                uf.union(i, j);
            }
            let mut sizes: std::collections::HashMap<usize, usize> = Default::default();
            for i in (0..w.len()).filter(|i| mask[*i]) {
                *sizes.entry(uf.find(i)).or_default() += 1;
            }
            let mut got: Vec<usize> = sizes.into_values().collect();
            got.sort_unstable_by(|a, b| b.cmp(a));
            let want: Vec<usize> = base.iter().map(|c| c.size).collect();
            prop_assert_eq!(got, want);
        }
    }
}
