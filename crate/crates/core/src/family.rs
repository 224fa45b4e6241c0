//! Greedy dyadic splitting of the parameter box into cells with per-cell
//! reduced hierarchies, producing sigma-admissible or (eps, mu)-admissible
//! families.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fem::StateVector;
use crate::measurement::MeasurementSpace;
use crate::model::{AffineModel, ParameterBox, SnapshotSet};
use crate::rb::{best_dimension, greedy_hierarchy, AffineReducedSpace, DimensionCriterion, RbHierarchy};

/// Admissibility target for the splitting loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AdmissibilityMode {
    /// Every cell must reach mu_k * eps_k <= sigma.
    Sigma { sigma: f64 },
    /// Every cell must reach eps_k <= eps and mu_k <= mu jointly.
    EpsMu { eps: f64, mu: f64 },
}

impl AdmissibilityMode {
    fn criterion(&self) -> DimensionCriterion {
        match *self {
            AdmissibilityMode::Sigma { .. } => DimensionCriterion::Sigma,
            AdmissibilityMode::EpsMu { eps, mu } => DimensionCriterion::EpsMu { eps, mu },
        }
    }

    fn passes(&self, tau: f64) -> bool {
        match *self {
            AdmissibilityMode::Sigma { sigma } => tau <= sigma,
            AdmissibilityMode::EpsMu { .. } => tau <= 1.0,
        }
    }
}

/// How the split coordinate is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Probe all coordinates with fresh child hierarchies and pick the one
    /// minimizing max(tau-, tau+); ties to the smallest coordinate.
    TauProbe,
    /// Same, but every even refinement level forces the cyclic coordinate
    /// (level/2 mod d) so all side lengths eventually shrink.
    CyclicMix,
}

/// One parameter cell with its reduced model.
#[derive(Debug, Clone)]
pub struct Cell {
    pub id: usize,
    pub box_y: ParameterBox,
    /// Per-coordinate flag: upper face closed (inherited from the global
    /// box); lower faces are always closed, interior upper faces open.
    pub hi_closed: Vec<bool>,
    pub level: u32,
    pub training_idx: Vec<usize>,
    pub hierarchy: RbHierarchy,
    pub space: AffineReducedSpace,
    pub tau: f64,
    pub data_starved: bool,
}

impl Cell {
    /// Cell membership under the closed-left/open-right dyadic convention.
    pub fn contains(&self, y: &DVector<f64>) -> bool {
        (0..self.box_y.dim()).all(|i| {
            y[i] >= self.box_y.lo[i]
                && (y[i] < self.box_y.hi[i] || (self.hi_closed[i] && y[i] <= self.box_y.hi[i]))
        })
    }
}

/// Record of one split, kept as an audit trail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitRecord {
    pub step: usize,
    pub cell_id: usize,
    pub direction: usize,
    pub level: u32,
    pub tau_before: f64,
    pub sigma_after: f64,
}

/// A family of disjoint cells covering the parameter box.
#[derive(Debug)]
pub struct ReducedFamily {
    pub cells: Vec<Cell>,
    pub mode: AdmissibilityMode,
    pub rule: SplitRule,
    /// max_k mu_k eps_k over the chosen spaces.
    pub sigma_achieved: f64,
    /// False when the cell budget ran out before all cells passed.
    pub converged: bool,
    pub split_log: Vec<SplitRecord>,
}

impl ReducedFamily {
    pub fn k(&self) -> usize {
        self.cells.len()
    }

    /// Index of the unique cell containing y.
    pub fn find_cell(&self, y: &DVector<f64>) -> Option<usize> {
        self.cells.iter().position(|c| c.contains(y))
    }

    pub fn sigma_of(cells: &[Cell]) -> f64 {
        cells.iter().map(|c| c.space.mu_eps()).fold(0.0, f64::max)
    }
}

/// Incremental family builder; `step` performs one split so drivers can
/// evaluate the family at every K.
pub struct FamilyBuilder<'a> {
    model: &'a AffineModel,
    mspace: &'a MeasurementSpace,
    training: &'a SnapshotSet,
    mode: AdmissibilityMode,
    rule: SplitRule,
    min_samples: usize,
    next_id: usize,
    steps: usize,
    pub cells: Vec<Cell>,
    pub split_log: Vec<SplitRecord>,
}

impl<'a> FamilyBuilder<'a> {
    pub fn new(
        model: &'a AffineModel,
        training: &'a SnapshotSet,
        mspace: &'a MeasurementSpace,
        mode: AdmissibilityMode,
        rule: SplitRule,
        min_samples: usize,
    ) -> Result<Self> {
        if training.is_empty() {
            return Err(CoreError::EmptySnapshotSet);
        }
        let mut builder = FamilyBuilder {
            model,
            mspace,
            training,
            mode,
            rule,
            min_samples,
            next_id: 0,
            steps: 0,
            cells: Vec::new(),
            split_log: Vec::new(),
        };
        let all: Vec<usize> = (0..training.len()).collect();
        let root = builder.build_cell(
            model.box_y.clone(),
            vec![true; model.box_y.dim()],
            0,
            all,
        )?;
        builder.cells.push(root);
        Ok(builder)
    }

    fn fresh_id(&mut self) -> usize {
        self.next_id += 1;
        self.next_id - 1
    }

    /// Builds a cell: offset at the box center, greedy hierarchy over the
    /// training subset, dimension choice per the admissibility criterion.
    /// A cell without training samples falls back to its center snapshot
    /// alone and is flagged data-starved.
    fn build_cell(
        &mut self,
        box_y: ParameterBox,
        hi_closed: Vec<bool>,
        level: u32,
        training_idx: Vec<usize>,
    ) -> Result<Cell> {
        let id = self.fresh_id();
        self.build_cell_with_id(id, box_y, hi_closed, level, training_idx)
    }

    fn build_cell_with_id(
        &self,
        id: usize,
        box_y: ParameterBox,
        hi_closed: Vec<bool>,
        level: u32,
        training_idx: Vec<usize>,
    ) -> Result<Cell> {
        let center = box_y.center();
        let offset = self.model.solve_state(&center)?;
        let states: Vec<StateVector> = if training_idx.is_empty() {
            vec![offset.clone()]
        } else {
            training_idx
                .iter()
                .map(|&i| self.training.states[i].clone())
                .collect()
        };
        let m = self.mspace.m();
        let hierarchy = greedy_hierarchy(&self.model.space, &states, &offset, m)?
            .with_stability(self.mspace);
        let (n, tau) = best_dimension(&hierarchy, self.mode.criterion(), 0);
        let space = hierarchy.affine_space(n, self.mspace, id);
        Ok(Cell {
            id,
            box_y,
            hi_closed,
            level,
            data_starved: training_idx.len() < self.min_samples,
            training_idx,
            hierarchy,
            space,
            tau,
        })
    }

    fn child_boxes(
        &self,
        cell: &Cell,
        dir: usize,
    ) -> ((ParameterBox, Vec<bool>), (ParameterBox, Vec<bool>)) {
        let (lo_box, hi_box) = cell.box_y.split(dir);
        let mut lo_closed = cell.hi_closed.clone();
        lo_closed[dir] = false;
        let hi_closed = cell.hi_closed.clone();
        ((lo_box, lo_closed), (hi_box, hi_closed))
    }

    fn partition_training(&self, idx: &[usize], box_y: &ParameterBox, hi_closed: &[bool], dir: usize) -> Vec<usize> {
        idx.iter()
            .copied()
            .filter(|&i| {
                let y = &self.training.parameters[i][dir];
                *y >= box_y.lo[dir] && (*y < box_y.hi[dir] || (hi_closed[dir] && *y <= box_y.hi[dir]))
            })
            .collect()
    }

    /// Evaluates the split of `cell` along `dir` with placeholder ids,
    /// returning the two child cells and the probe value max(tau-, tau+).
    fn probe_direction(&self, cell: &Cell, dir: usize) -> Result<(Cell, Cell, f64)> {
        let ((lo_box, lo_closed), (hi_box, hi_closed)) = self.child_boxes(cell, dir);
        let lo_idx = self.partition_training(&cell.training_idx, &lo_box, &lo_closed, dir);
        let hi_idx = self.partition_training(&cell.training_idx, &hi_box, &hi_closed, dir);
        let lo = self.build_cell_with_id(usize::MAX, lo_box, lo_closed, cell.level + 1, lo_idx)?;
        let hi = self.build_cell_with_id(usize::MAX, hi_box, hi_closed, cell.level + 1, hi_idx)?;
        let value = lo.tau.max(hi.tau);
        Ok((lo, hi, value))
    }

    /// Chooses the split direction for a cell per the configured rule. The
    /// probes over the d candidate directions run in parallel; the returned
    /// children carry fresh cell ids.
    pub fn split_direction(&mut self, cell: &Cell) -> Result<(usize, Cell, Cell)> {
        let d = cell.box_y.dim();
        let (dir, mut lo, mut hi) = if self.rule == SplitRule::CyclicMix && cell.level.is_multiple_of(2) {
            let dir = (cell.level / 2) as usize % d;
            let (lo, hi, _) = self.probe_direction(cell, dir)?;
            (dir, lo, hi)
        } else {
            let probes: Vec<Result<(Cell, Cell, f64)>> = (0..d)
                .into_par_iter()
                .map(|dir| self.probe_direction(cell, dir))
                .collect();
            let mut best: Option<(usize, Cell, Cell, f64)> = None;
            for (dir, probe) in probes.into_iter().enumerate() {
                let (lo, hi, value) = probe?;
                let better = match &best {
                    None => true,
                    Some((_, _, _, v)) => value < *v,
                };
                if better {
                    best = Some((dir, lo, hi, value));
                }
            }
            let (dir, lo, hi, _) = best.expect("at least one direction");
            (dir, lo, hi)
        };
        lo.id = self.fresh_id();
        lo.space.cell_id = lo.id;
        hi.id = self.fresh_id();
        hi.space.cell_id = hi.id;
        Ok((dir, lo, hi))
    }

    /// Index of the next cell to split: argmax mu_k eps_k among the failing
    /// cells, ties to the smallest index.
    fn pick_cell(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.cells.iter().enumerate() {
            if self.mode.passes(c.tau) {
                continue;
            }
            let score = c.space.mu_eps();
            match best {
                Some((_, s)) if score <= s => {}
                _ => best = Some((i, score)),
            }
        }
        best.map(|(i, _)| i)
    }

    /// Performs one split. Returns false when every cell already passes.
    pub fn step(&mut self) -> Result<bool> {
        let Some(pos) = self.pick_cell() else {
            return Ok(false);
        };
        let cell = self.cells[pos].clone();
        let (dir, lo, hi) = self.split_direction(&cell)?;
        self.cells[pos] = lo;
        self.cells.insert(pos + 1, hi);
        self.steps += 1;
        self.split_log.push(SplitRecord {
            step: self.steps,
            cell_id: cell.id,
            direction: dir,
            level: cell.level,
            tau_before: cell.tau,
            sigma_after: ReducedFamily::sigma_of(&self.cells),
        });
        Ok(true)
    }

    pub fn all_pass(&self) -> bool {
        self.cells.iter().all(|c| self.mode.passes(c.tau))
    }

    pub fn finish(self) -> ReducedFamily {
        let converged = self.all_pass();
        let sigma_achieved = ReducedFamily::sigma_of(&self.cells);
        ReducedFamily {
            cells: self.cells,
            mode: self.mode,
            rule: self.rule,
            sigma_achieved,
            converged,
            split_log: self.split_log,
        }
    }
}

/// Runs the splitting loop until every cell passes or the cell budget is
/// exhausted (the family is then flagged non-converged).
pub fn build_family(
    model: &AffineModel,
    training: &SnapshotSet,
    mspace: &MeasurementSpace,
    mode: AdmissibilityMode,
    rule: SplitRule,
    k_max: usize,
    min_samples: usize,
) -> Result<ReducedFamily> {
    if k_max == 0 {
        return Err(CoreError::EmptyBudget);
    }
    let mut builder = FamilyBuilder::new(model, training, mspace, mode, rule, min_samples)?;
    while builder.cells.len() < k_max {
        if !builder.step()? {
            break;
        }
    }
    let family = builder.finish();
    if !family.converged {
        log::warn!(
            "family did not converge within the cell budget: K = {}, sigma = {:.3e}",
            family.k(),
            family.sigma_achieved
        );
    }
    Ok(family)
}
