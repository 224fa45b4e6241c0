//! On-disk artifacts: serialized families, observations, and raw state
//! dumps, so training and estimation can run as separate phases.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::family::{AdmissibilityMode, Cell, ReducedFamily, SplitRecord, SplitRule};
use crate::fem::{DiscreteSpace, StateVector};
use crate::measurement::{build_from_layout, MeasurementLayout, MeasurementSpace, Observation};
use crate::model::{AffineModel, ModelSpec, ParameterBox};
use crate::rb::RbHierarchy;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct HierarchyArtifact {
    pub offset: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub eps: Vec<f64>,
    pub mu: Vec<f64>,
    pub picks: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CellArtifact {
    pub id: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub hi_closed: Vec<bool>,
    pub level: u32,
    pub chosen_n: usize,
    pub tau: f64,
    pub data_starved: bool,
    pub training_count: usize,
    pub hierarchy: HierarchyArtifact,
}

/// A trained family with everything needed to re-run estimation.
#[derive(Debug, Serialize, Deserialize)]
pub struct FamilyArtifact {
    pub format_version: u32,
    pub model: ModelSpec,
    pub measurement: MeasurementLayout,
    pub mode: AdmissibilityMode,
    pub rule: SplitRule,
    pub sigma_achieved: f64,
    pub converged: bool,
    pub training_seed: u64,
    pub training_size: usize,
    pub cells: Vec<CellArtifact>,
    pub split_log: Vec<SplitRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ObservationArtifact {
    pub format_version: u32,
    pub m: usize,
    pub w: Vec<f64>,
    pub raw_z: Option<Vec<f64>>,
    pub noise_eps: Option<f64>,
    /// True parameter, when the producer knows it (diagnostics only).
    pub truth_y: Option<Vec<f64>>,
}

impl FamilyArtifact {
    pub fn from_family(
        family: &ReducedFamily,
        model: &AffineModel,
        mspace: &MeasurementSpace,
        training_seed: u64,
        training_size: usize,
    ) -> Self {
        let cells = family
            .cells
            .iter()
            .map(|c| CellArtifact {
                id: c.id,
                lo: c.box_y.lo.clone(),
                hi: c.box_y.hi.clone(),
                hi_closed: c.hi_closed.clone(),
                level: c.level,
                chosen_n: c.space.n(),
                tau: c.tau,
                data_starved: c.data_starved,
                training_count: c.training_idx.len(),
                hierarchy: HierarchyArtifact {
                    offset: c.hierarchy.offset.iter().copied().collect(),
                    basis: c
                        .hierarchy
                        .basis
                        .iter()
                        .map(|b| b.iter().copied().collect())
                        .collect(),
                    eps: c.hierarchy.eps.clone(),
                    mu: c.hierarchy.mu.clone(),
                    picks: c.hierarchy.picks.clone(),
                },
            })
            .collect();
        FamilyArtifact {
            format_version: FORMAT_VERSION,
            model: model.spec.clone(),
            measurement: mspace.layout.clone(),
            mode: family.mode,
            rule: family.rule,
            sigma_achieved: family.sigma_achieved,
            converged: family.converged,
            training_seed,
            training_size,
            cells,
            split_log: family.split_log.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let artifact: FamilyArtifact = serde_json::from_reader(std::io::BufReader::new(file))?;
        if artifact.format_version != FORMAT_VERSION {
            return Err(CoreError::ArtifactVersion {
                found: artifact.format_version,
                supported: FORMAT_VERSION,
            });
        }
        Ok(artifact)
    }

    /// Rebuilds the model, measurement space, and family. The measurement
    /// assembly is replayed from the stored box layout, so representers and
    /// the orthonormal basis are bit-reproducible.
    pub fn restore(&self) -> Result<(AffineModel, MeasurementSpace, ReducedFamily)> {
        let model = AffineModel::from_spec(&self.model)?;
        let mspace = build_from_layout(&model.space, &self.measurement)?;
        let n_dof = model.space.n_dof();
        let mut cells = Vec::with_capacity(self.cells.len());
        for c in &self.cells {
            if c.hierarchy.offset.len() != n_dof {
                return Err(CoreError::Artifact(format!(
                    "cell {} offset has {} entries, expected {}",
                    c.id,
                    c.hierarchy.offset.len(),
                    n_dof
                )));
            }
            let hierarchy = RbHierarchy {
                offset: DVector::from_vec(c.hierarchy.offset.clone()),
                basis: c
                    .hierarchy
                    .basis
                    .iter()
                    .map(|b| DVector::from_vec(b.clone()))
                    .collect(),
                eps: c.hierarchy.eps.clone(),
                mu: c.hierarchy.mu.clone(),
                cross_gram: DMatrix::zeros(0, 0),
                picks: c.hierarchy.picks.clone(),
            }
            .with_stability_gram_only(&mspace);
            let space = hierarchy.affine_space(c.chosen_n, &mspace, c.id);
            cells.push(Cell {
                id: c.id,
                box_y: ParameterBox::new(c.lo.clone(), c.hi.clone())?,
                hi_closed: c.hi_closed.clone(),
                level: c.level,
                training_idx: Vec::new(),
                hierarchy,
                space,
                tau: c.tau,
                data_starved: c.data_starved,
            });
        }
        let family = ReducedFamily {
            cells,
            mode: self.mode,
            rule: self.rule,
            sigma_achieved: self.sigma_achieved,
            converged: self.converged,
            split_log: self.split_log.clone(),
        };
        Ok((model, mspace, family))
    }
}

impl RbHierarchy {
    /// Recomputes the cross-Gramian against a measurement space while
    /// keeping the stored eps/mu tables (used when restoring artifacts).
    fn with_stability_gram_only(mut self, mspace: &MeasurementSpace) -> Self {
        self.cross_gram = crate::rb::cross_gramian(&self.basis, mspace);
        self
    }
}

impl ObservationArtifact {
    pub fn from_observation(obs: &Observation, truth_y: Option<&DVector<f64>>) -> Self {
        ObservationArtifact {
            format_version: FORMAT_VERSION,
            m: obs.w.len(),
            w: obs.w.iter().copied().collect(),
            raw_z: obs.raw_z.as_ref().map(|z| z.iter().copied().collect()),
            noise_eps: obs.noise.as_ref().map(|n| n.eps_noise),
            truth_y: truth_y.map(|y| y.iter().copied().collect()),
        }
    }

    pub fn to_observation(&self) -> Observation {
        Observation {
            w: DVector::from_vec(self.w.clone()),
            raw_z: self.raw_z.clone().map(DVector::from_vec),
            noise: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let artifact: ObservationArtifact = serde_json::from_reader(std::io::BufReader::new(file))?;
        if artifact.format_version != FORMAT_VERSION {
            return Err(CoreError::ArtifactVersion {
                found: artifact.format_version,
                supported: FORMAT_VERSION,
            });
        }
        Ok(artifact)
    }
}

/// Header of a raw state dump.
#[derive(Debug, Serialize, Deserialize)]
struct StateDumpHeader {
    format_version: u32,
    n_dof: usize,
    n_per_side: usize,
}

/// Writes nodal values as a one-line JSON header followed by little-endian
/// f64 bytes.
pub fn write_state_dump(path: &Path, space: &DiscreteSpace, state: &StateVector) -> Result<()> {
    let header = StateDumpHeader {
        format_version: FORMAT_VERSION,
        n_dof: space.n_dof(),
        n_per_side: space.grid.n_per_side,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut file, &header)?;
    file.write_all(b"\n")?;
    for v in state.iter() {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_state_dump(path: &Path) -> Result<(usize, StateVector)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header_bytes = Vec::new();
    // Read up to the newline terminating the header.
    let mut byte = [0u8; 1];
    loop {
        file.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: StateDumpHeader = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(CoreError::ArtifactVersion {
            found: header.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    if buf.len() != 8 * header.n_dof {
        return Err(CoreError::Artifact(format!(
            "state dump holds {} bytes, expected {}",
            buf.len(),
            8 * header.n_dof
        )));
    }
    let values: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header.n_per_side, DVector::from_vec(values)))
}
