//! Basis-solve caching keyed by geometry hash and solver settings.
//!
//! A grid scan over charge densities reuses one basis set per fiber position
//! because densities enter only as linear scale factors; only fiber motion
//! forces re-solves. Cached sets live in memory and, when a directory is
//! configured, on disk in the self-describing map format.

use crate::composer::BasisSet;
use crate::error::Result;
use crate::geometry::{Excitation, GeometrySpec};
use crate::grid::MapGrid;
use crate::io::{read_potential_map, write_potential_map};
use crate::maps::PotentialMap;
use crate::solver::{solve_all_bases, BasisSolver, SolveReport, SolverConfig};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

/// Abstract source of basis sets per moving-fiber distance; implemented by
/// the solver-backed cache and by analytic test doubles.
pub trait BasisProvider: Sync {
    fn bases_for(&self, d: f64) -> Result<Arc<BasisSet>>;
}

pub struct BasisCache {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, Arc<BasisSet>>>,
}

const BASIS_TAGS: [&str; 7] = [
    "rf_unit",
    "ec_left_unit",
    "ec_right_unit",
    "charge_Mf_unit",
    "charge_Ms_unit",
    "charge_Pf_unit",
    "charge_Ps_unit",
];

impl BasisCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        BasisCache { dir, mem: Mutex::new(HashMap::new()) }
    }

    pub fn in_memory() -> Self {
        Self::new(None)
    }

    /// Cache key binding the geometry to the discretization that produced the
    /// basis files.
    pub fn key(geometry: &GeometrySpec, config: &SolverConfig, map: &MapGrid) -> String {
        let blob = format!(
            "{}|{}|{}",
            geometry.hash(),
            serde_json::to_string(config).expect("config serializes"),
            serde_json::to_string(map).expect("map grid serializes"),
        );
        let digest = Sha256::digest(blob.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Returns the cached basis set for this geometry, solving on a miss.
    /// The report list is empty when every map came from cache.
    pub fn get_or_solve(
        &self,
        geometry: &GeometrySpec,
        config: &SolverConfig,
        map: &MapGrid,
    ) -> Result<(Arc<BasisSet>, Vec<SolveReport>)> {
        let key = Self::key(geometry, config, map);
        if let Some(hit) = self.mem.lock().expect("cache lock").get(&key) {
            return Ok((hit.clone(), Vec::new()));
        }
        if let Some(dir) = &self.dir {
            if let Some(set) = self.try_load(dir, &key, geometry)? {
                let arc = Arc::new(set);
                self.mem.lock().expect("cache lock").insert(key, arc.clone());
                return Ok((arc, Vec::new()));
            }
        }
        let solver = BasisSolver::new(geometry, config, map.clone())?;
        let (set, reports) = solve_all_bases(&solver)?;
        if let Some(dir) = &self.dir {
            std::fs::create_dir_all(dir)?;
            for m in all_maps(&set) {
                write_potential_map(&dir.join(format!("{key}-{}.pmap", m.excitation.tag())), m)?;
            }
        }
        let arc = Arc::new(set);
        self.mem.lock().expect("cache lock").insert(key, arc.clone());
        Ok((arc, reports))
    }

    fn try_load(
        &self,
        dir: &PathBuf,
        key: &str,
        geometry: &GeometrySpec,
    ) -> Result<Option<BasisSet>> {
        let mut maps: Vec<PotentialMap> = Vec::with_capacity(7);
        for tag in BASIS_TAGS {
            let path = dir.join(format!("{key}-{tag}.pmap"));
            if !path.exists() {
                return Ok(None);
            }
            let map = read_potential_map(&path)?;
            if map.geometry_hash != geometry.hash() {
                return Err(crate::error::Error::StaleBasis(format!(
                    "{}: written for geometry {}, expected {}",
                    path.display(),
                    map.geometry_hash,
                    geometry.hash()
                )));
            }
            maps.push(map);
        }
        let mut it = maps.into_iter();
        let set = BasisSet {
            rf: it.next().expect("7 maps"),
            ec_left: it.next().expect("7 maps"),
            ec_right: it.next().expect("7 maps"),
            m_facet: it.next().expect("7 maps"),
            m_side: it.next().expect("7 maps"),
            p_facet: it.next().expect("7 maps"),
            p_side: it.next().expect("7 maps"),
        };
        set.validate()?;
        Ok(Some(set))
    }
}

fn all_maps(set: &BasisSet) -> [&PotentialMap; 7] {
    set.maps()
}

/// Sanity check used by loaders: the map's tag matches its slot.
pub fn excitation_matches(map: &PotentialMap, expected: Excitation) -> bool {
    map.excitation == expected
}
