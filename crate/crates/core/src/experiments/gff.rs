use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::environment::CoefficientMap;
use crate::error::Result;
use crate::homogenize::{estimate_ah, estimate_q, MatrixEstimate};
use crate::kernels::gff_defect;
use crate::rng::{GaussianStream, Purpose};
use crate::stats::RunningStats;

/// Parametric resamples of `Q` and `A_h` behind the defect error bar.
pub const DEFECT_RESAMPLES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GffRow {
    pub contrast: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub homogenized: Vec<f64>,
    pub q: MatrixEstimate,
    pub defect: f64,
    pub defect_error: f64,
}

fn symmetric(m: &MatrixEstimate, perturb: Option<&mut GaussianStream>) -> DMatrix<f64> {
    let mut q = m.to_matrix();
    if let Some(rng) = perturb {
        for i in 0..m.dim {
            for j in 0..m.dim {
                q[(i, j)] += m.error(i, j) * rng.next_normal();
            }
        }
    }
    (&q + q.transpose()) * 0.5
}

/// Estimates `Q` and `A_h` at each configured contrast and measures their distance from a
/// Gaussian free field structure.
pub fn gff_sweep(config: &RunConfig) -> Result<Vec<GffRow>> {
    config.validate()?;
    let g = config.geometry()?;
    let quad = config.q_spec()?;
    config
        .contrasts
        .iter()
        .enumerate()
        .map(|(c_index, &contrast)| {
            let map = CoefficientMap::with_contrast(contrast)?;
            let (a_min, a_max) = map.range();
            let q = estimate_q(&config.xi, &g, &map, &quad, &config.solver)?.matrix;
            let ah = estimate_ah(&g, &map, config.seed, config.samples.max(2), config.mu, &config.solver)?.matrix;
            let homogenized = ah.diagonal();
            let defect = gff_defect(&symmetric(&q, None), &homogenized)?.defect;
            let mut rng = GaussianStream::new(config.seed, c_index as u64, Purpose::Bootstrap);
            let mut spread = RunningStats::new();
            for _ in 0..DEFECT_RESAMPLES {
                let qp = symmetric(&q, Some(&mut rng));
                let hp: Vec<f64> = (0..ah.dim)
                    .map(|i| (homogenized[i] + ah.error(i, i) * rng.next_normal()).max(1e-12))
                    .collect();
                if let Ok(v) = gff_defect(&qp, &hp) {
                    spread.push(v.defect);
                }
            }
            Ok(GffRow {
                contrast,
                a_min,
                a_max,
                homogenized,
                q,
                defect,
                defect_error: spread.variance().sqrt(),
            })
        })
        .collect()
}

pub fn gff_csv(rows: &[GffRow]) -> String {
    let mut out = String::from("contrast,a_min,a_max,homogenized_mean,q_trace,defect,defect_error\n");
    for r in rows {
        let d = r.q.dim;
        out.push_str(&format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.contrast,
            r.a_min,
            r.a_max,
            r.homogenized.iter().sum::<f64>() / d as f64,
            (0..d).map(|i| r.q.get(i, i)).sum::<f64>(),
            r.defect,
            r.defect_error
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::config::QConfig;

    #[test]
    fn small_sweep() {
        let config = RunConfig {
            side: 6,
            samples: 4,
            quadrature: QConfig { nodes: 2, samples: 6 },
            contrasts: vec![3.0],
            ..RunConfig::default()
        };
        let rows = gff_sweep(&config).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].defect >= 0.0 && rows[0].defect.is_finite());
        assert!(rows[0].defect_error.is_finite());
        assert!((rows[0].a_max / rows[0].a_min - 3.0).abs() < 1e-12);
    }
}
