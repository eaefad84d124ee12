//! Position-embedding schemes for vision tokens and PE-budget accounting.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::VisionSegment;
use crate::numerics::{Graph, Group, Init, Matrix, NodeId, ParamId, ParamStore, Real};

const PE_STD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeScheme {
    #[default]
    Original,
    ShareAll,
    ShareByRow,
    ShareByRowCol,
}

impl PeScheme {
    pub const ALL: [PeScheme; 4] = [
        PeScheme::Original,
        PeScheme::ShareAll,
        PeScheme::ShareByRow,
        PeScheme::ShareByRowCol,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PeScheme::Original => "original",
            PeScheme::ShareAll => "share_all",
            PeScheme::ShareByRow => "share_by_row",
            PeScheme::ShareByRowCol => "share_by_row_col",
        }
    }
}

impl fmt::Display for PeScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PeScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| Error::Positional(format!("unknown PE scheme `{s}`")))
    }
}

/// Table indices for every vision token of one image, in sequence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionAssignment {
    pub scheme: PeScheme,
    /// Index into the vision table (the row table for `ShareByRowCol`).
    pub rows: Vec<usize>,
    /// Column-table index; only for `ShareByRowCol`.
    pub cols: Option<Vec<usize>>,
    pub distinct_count: usize,
}

impl PositionAssignment {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn check_grids(grids: &[(usize, usize)]) -> Result<()> {
    if grids.is_empty() {
        return Err(Error::Positional("no vision grids".into()));
    }
    if let Some(g) = grids.iter().find(|(r, c)| *r == 0 || *c == 0) {
        return Err(Error::Positional(format!("empty grid {}x{}", g.0, g.1)));
    }
    Ok(())
}

pub fn assign_positions(scheme: PeScheme, grids: &[(usize, usize)]) -> Result<PositionAssignment> {
    check_grids(grids)?;
    let total: usize = grids.iter().map(|(r, c)| r * c).sum();
    let mut rows = Vec::with_capacity(total);
    let mut cols = Vec::with_capacity(total);
    let mut next = 0;
    for &(gr, gc) in grids {
        for r in 0..gr {
            for c in 0..gc {
                rows.push(match scheme {
                    PeScheme::Original => {
                        next += 1;
                        next - 1
                    }
                    PeScheme::ShareAll => 0,
                    PeScheme::ShareByRow | PeScheme::ShareByRowCol => r,
                });
                cols.push(c);
            }
        }
    }
    let distinct_rows = rows.iter().collect::<BTreeSet<_>>().len();
    let (cols, distinct_count) = if scheme == PeScheme::ShareByRowCol {
        let distinct_cols = cols.iter().collect::<BTreeSet<_>>().len();
        (Some(cols), distinct_rows + distinct_cols)
    } else {
        (None, distinct_rows)
    };
    Ok(PositionAssignment {
        scheme,
        rows,
        cols,
        distinct_count,
    })
}

/// Like [`assign_positions`], checking each segment's grid against its length.
pub fn assign_for_segments(scheme: PeScheme, segments: &[VisionSegment]) -> Result<PositionAssignment> {
    let mut expected = 0;
    for s in segments {
        if s.grid.0 * s.grid.1 != s.len || s.start != expected {
            return Err(Error::Positional(format!(
                "segment `{}` spans {} tokens at {} but has grid {}x{}",
                s.expert, s.len, s.start, s.grid.0, s.grid.1
            )));
        }
        expected += s.len;
    }
    let grids: Vec<_> = segments.iter().map(|s| s.grid).collect();
    assign_positions(scheme, &grids)
}

/// Distinct learnable PE vectors one image consumes.
pub fn position_budget(scheme: PeScheme, grids: &[(usize, usize)]) -> Result<usize> {
    check_grids(grids)?;
    let max_rows = grids.iter().map(|g| g.0).max().unwrap_or(0);
    let max_cols = grids.iter().map(|g| g.1).max().unwrap_or(0);
    Ok(match scheme {
        PeScheme::Original => grids.iter().map(|(r, c)| r * c).sum(),
        PeScheme::ShareAll => 1,
        PeScheme::ShareByRow => max_rows,
        PeScheme::ShareByRowCol => max_rows + max_cols,
    })
}

/// Learnable position tables. Vision tables live in the `pe` group, the
/// text table in `lm`.
#[derive(Debug, Clone, Copy)]
pub struct PeTables {
    pub scheme: PeScheme,
    pub vision: ParamId,
    pub col: Option<ParamId>,
    pub text: ParamId,
}

impl PeTables {
    /// Sizes the vision tables for `grids` (one image's post-fusion layout).
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        scheme: PeScheme,
        grids: &[(usize, usize)],
        d_model: usize,
        max_text_len: usize,
    ) -> Result<Self> {
        check_grids(grids)?;
        let max_rows = grids.iter().map(|g| g.0).max().unwrap_or(0);
        let max_cols = grids.iter().map(|g| g.1).max().unwrap_or(0);
        let vision_rows = match scheme {
            PeScheme::Original => grids.iter().map(|(r, c)| r * c).sum(),
            PeScheme::ShareAll => 1,
            PeScheme::ShareByRow | PeScheme::ShareByRowCol => max_rows,
        };
        let vision = store.init(seed, "pe.vision", Group::Pe, vision_rows, d_model, Init::Normal(PE_STD))?;
        let col = if scheme == PeScheme::ShareByRowCol {
            Some(store.init(seed, "pe.col", Group::Pe, max_cols, d_model, Init::Normal(PE_STD))?)
        } else {
            None
        };
        let text = store.init(seed, "lm.text_pos", Group::Lm, max_text_len, d_model, Init::Normal(PE_STD))?;
        Ok(Self {
            scheme,
            vision,
            col,
            text,
        })
    }

    pub fn max_text_len<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.text).rows()
    }

    /// Vision PE rows for `assignment`, recorded in `g`.
    pub fn embed_node<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        assignment: &PositionAssignment,
    ) -> Result<NodeId> {
        if assignment.scheme != self.scheme {
            return Err(Error::Positional(format!(
                "assignment uses {} but tables were built for {}",
                assignment.scheme, self.scheme
            )));
        }
        check_bounds(&assignment.rows, store.value(self.vision).rows(), "vision")?;
        let table = g.param(store, self.vision);
        let rows = g.gather_rows(table, &assignment.rows)?;
        match (self.col, &assignment.cols) {
            (Some(col), Some(cols)) => {
                check_bounds(cols, store.value(col).rows(), "column")?;
                let table = g.param(store, col);
                let c = g.gather_rows(table, cols)?;
                g.add(rows, c)
            }
            (None, None) => Ok(rows),
            _ => Err(Error::Positional("column indices do not match the table set".into())),
        }
    }

    pub fn text_node<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, positions: &[usize]) -> Result<NodeId> {
        check_bounds(positions, store.value(self.text).rows(), "text")?;
        let table = g.param(store, self.text);
        g.gather_rows(table, positions)
    }
}

fn check_bounds(indices: &[usize], len: usize, table: &str) -> Result<()> {
    match indices.iter().find(|&&i| i >= len) {
        Some(i) => Err(Error::Positional(format!("index {i} outside the {table} table of {len} rows"))),
        None => Ok(()),
    }
}

/// Eager PE lookup: `N × d_model`.
pub fn embed_positions<T: Real>(
    assignment: &PositionAssignment,
    tables: &PeTables,
    store: &ParamStore<T>,
) -> Result<Matrix<T>> {
    let mut g = Graph::new();
    let node = tables.embed_node(&mut g, store, assignment)?;
    Ok(g.value(node).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clip_budgets() {
        let clip = [(24, 24)];
        assert_eq!(position_budget(PeScheme::Original, &clip).unwrap(), 576);
        assert_eq!(position_budget(PeScheme::ShareByRow, &clip).unwrap(), 24);
        assert_eq!(position_budget(PeScheme::ShareAll, &clip).unwrap(), 1);
        assert_eq!(position_budget(PeScheme::ShareByRowCol, &clip).unwrap(), 48);
        assert_eq!(position_budget(PeScheme::ShareByRow, &[(64, 64)]).unwrap(), 64);
        assert_eq!(position_budget(PeScheme::ShareAll, &[(64, 64), (24, 24)]).unwrap(), 1);
        assert!(position_budget(PeScheme::ShareAll, &[]).is_err());
    }

    #[test]
    fn clip_assignments() {
        let a = assign_positions(PeScheme::ShareAll, &[(24, 24)]).unwrap();
        assert_eq!(a.len(), 576);
        assert!(a.rows.iter().all(|&i| i == 0));
        assert_eq!(a.distinct_count, 1);
        let a = assign_positions(PeScheme::ShareByRow, &[(24, 24)]).unwrap();
        assert_eq!(a.rows.iter().copied().max(), Some(23));
        assert_eq!(a.distinct_count, 24);
        assert_eq!(assign_positions(PeScheme::ShareByRow, &[(64, 64)]).unwrap().distinct_count, 64);
    }

    #[test]
    fn row_indices_restart_per_segment() {
        let a = assign_positions(PeScheme::ShareByRow, &[(2, 2), (3, 1)]).unwrap();
        assert_eq!(a.rows, vec![0, 0, 1, 1, 0, 1, 2]);
        let a = assign_positions(PeScheme::Original, &[(2, 2), (3, 1)]).unwrap();
        assert_eq!(a.rows, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn segment_grid_mismatch_is_rejected() {
        let seg = VisionSegment {
            expert: "clip".into(),
            start: 0,
            len: 10,
            grid: (3, 3),
        };
        assert!(assign_for_segments(PeScheme::ShareAll, &[seg]).is_err());
    }

    fn tables(scheme: PeScheme, grids: &[(usize, usize)]) -> (ParamStore<f64>, PeTables) {
        let mut store = ParamStore::new();
        let t = PeTables::new(&mut store, 3, scheme, grids, 8, 16).unwrap();
        (store, t)
    }

    #[test]
    fn share_all_gives_one_vector() {
        let (store, t) = tables(PeScheme::ShareAll, &[(4, 4)]);
        let a = assign_positions(PeScheme::ShareAll, &[(4, 4)]).unwrap();
        let e = embed_positions(&a, &t, &store).unwrap();
        for r in 1..e.rows() {
            assert_eq!(e.row(r), e.row(0));
        }
    }

    #[test]
    fn zero_column_table_degenerates_to_rows() {
        let grids = [(3, 4), (2, 2)];
        let (store_r, t_r) = tables(PeScheme::ShareByRow, &grids);
        let (mut store_rc, t_rc) = tables(PeScheme::ShareByRowCol, &grids);
        store_rc.get_mut(t_rc.col.unwrap()).value.fill(0.0);
        let by_row = embed_positions(&assign_positions(PeScheme::ShareByRow, &grids).unwrap(), &t_r, &store_r).unwrap();
        let by_rc =
            embed_positions(&assign_positions(PeScheme::ShareByRowCol, &grids).unwrap(), &t_rc, &store_rc).unwrap();
        assert_eq!(by_row, by_rc);
    }

    #[test]
    fn same_row_tokens_differ_only_by_column_vector() {
        let (store, t) = tables(PeScheme::ShareByRowCol, &[(8, 8)]);
        let a = assign_positions(PeScheme::ShareByRowCol, &[(8, 8)]).unwrap();
        let e = embed_positions(&a, &t, &store).unwrap();
        let col = store.value(t.col.unwrap());
        let (i, j) = (3 * 8 + 5, 3 * 8 + 7);
        for k in 0..8 {
            let diff = e.get(i, k) - e.get(j, k);
            assert!((diff - (col.get(5, k) - col.get(7, k))).abs() < 1e-12);
        }
    }

    #[test]
    fn unreferenced_rows_get_no_gradient() {
        let (mut store, t) = tables(PeScheme::Original, &[(4, 4)]);
        let a = PositionAssignment {
            scheme: PeScheme::Original,
            rows: vec![1, 5, 5],
            cols: None,
            distinct_count: 2,
        };
        let mut g = Graph::new();
        let n = t.embed_node(&mut g, &store, &a).unwrap();
        let s = g.sum(n).unwrap();
        g.backward(s, &mut store).unwrap();
        let grad = &store.get(t.vision).grad;
        for r in 0..grad.rows() {
            let expected = match r {
                1 => 1.0,
                5 => 2.0,
                _ => 0.0,
            };
            assert!(grad.row(r).iter().all(|&v| v == expected), "row {r}");
        }
    }

    #[test]
    fn out_of_bounds_index_is_rejected() {
        let (store, t) = tables(PeScheme::ShareAll, &[(2, 2)]);
        let a = PositionAssignment {
            scheme: PeScheme::ShareAll,
            rows: vec![0, 1],
            cols: None,
            distinct_count: 2,
        };
        assert!(embed_positions(&a, &t, &store).is_err());
    }

    #[test]
    fn scheme_labels_round_trip() {
        for s in PeScheme::ALL {
            assert_eq!(s.label().parse::<PeScheme>().unwrap(), s);
        }
    }

    proptest! {
        #[test]
        fn distinct_count_matches_budget(
            grids in proptest::collection::vec((1usize..12, 1usize..12), 1..4),
            k in 0usize..4,
        ) {
            let scheme = PeScheme::ALL[k];
            let a = assign_positions(scheme, &grids).unwrap();
            prop_assert_eq!(a.distinct_count, position_budget(scheme, &grids).unwrap());
            prop_assert_eq!(a.len(), grids.iter().map(|(r, c)| r * c).sum::<usize>());
        }

        #[test]
        fn share_all_is_permutation_invariant(n in 1usize..30, seed in 0u64..100) {
            let (store, t) = tables(PeScheme::ShareAll, &[(1, n)]);
            let a = assign_positions(PeScheme::ShareAll, &[(1, n)]).unwrap();
            let e = embed_positions(&a, &t, &store).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left((seed as usize) % n);
            let permuted = PositionAssignment { rows: perm.iter().map(|&i| a.rows[i]).collect(), ..a.clone() };
            prop_assert_eq!(embed_positions(&permuted, &t, &store).unwrap(), e);
        }
    }
}
