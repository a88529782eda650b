//! Count-level evaluation: MAE, RMSE and the over-counting leakage ratio.

use crate::error::{Error, Result};
use crate::synthgen::Scene;

fn check_lengths(preds: &[f64], gts: &[f64], op: &str) -> Result<()> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Contract(format!(
            "{op} needs equal non-empty inputs, got {} predictions and {} targets",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_lengths(preds, gts, "mae")?;
    let total: f64 = preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).sum();
    Ok(total / preds.len() as f64)
}

pub fn rmse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_lengths(preds, gts, "rmse")?;
    let total: f64 = preds.iter().zip(gts).map(|(p, g)| (p - g).powi(2)).sum();
    Ok((total / preds.len() as f64).sqrt())
}

/// Mean over scenes with at least one non-prompted object of
/// `max(0, pred - specified) / nonspecified`. 1.0 means every other object was
/// counted too; 0.0 means none was.
pub fn leakage(scenes: &[Scene], preds: &[f64]) -> Result<f64> {
    if scenes.len() != preds.len() {
        return Err(Error::Contract(format!(
            "leakage got {} scenes and {} predictions",
            scenes.len(),
            preds.len()
        )));
    }
    let ratios: Vec<f64> = scenes
        .iter()
        .zip(preds)
        .filter(|(s, _)| s.nonspecified_count() > 0)
        .map(|(s, &p)| (p - s.specified_count() as f64).max(0.0) / s.nonspecified_count() as f64)
        .collect();
    if ratios.is_empty() {
        return Err(Error::Contract(
            "leakage needs at least one scene with non-specified objects".into(),
        ));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub predicted: f64,
    pub specified: usize,
    pub nonspecified: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub leakage: f64,
    pub records: Vec<SceneRecord>,
}

impl EvalReport {
    pub fn from_predictions(scenes: &[Scene], preds: &[f64]) -> Result<Self> {
        let gts: Vec<f64> = scenes.iter().map(|s| s.specified_count() as f64).collect();
        Ok(Self {
            mae: mae(preds, &gts)?,
            rmse: rmse(preds, &gts)?,
            leakage: leakage(scenes, preds)?,
            records: scenes
                .iter()
                .zip(preds)
                .map(|(s, &p)| SceneRecord {
                    predicted: p,
                    specified: s.specified_count(),
                    nonspecified: s.nonspecified_count(),
                })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_scene, SceneSpec};
    use proptest::prelude::*;

    #[test]
    fn mae_rmse_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[3.0, 5.0], &[1.0, 5.0]).unwrap(), 1.0);
        assert!((rmse(&[3.0, 5.0], &[1.0, 5.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn leakage_examples() {
        let multi = generate_scene(&SceneSpec::new(vec![4, 6], 0, 1)).unwrap();
        let single = generate_scene(&SceneSpec::new(vec![3], 0, 2)).unwrap();
        let scenes = vec![multi.clone(), single.clone()];
        assert_eq!(leakage(&scenes, &[4.0, 9.0]).unwrap(), 0.0);
        assert_eq!(leakage(&[multi.clone()], &[10.0]).unwrap(), 1.0);
        assert_eq!(leakage(&[multi.clone()], &[1.0]).unwrap(), 0.0);
        assert!(leakage(&[single], &[3.0]).is_err());
        assert!(leakage(&[multi], &[]).is_err());
    }

    #[test]
    fn total_count_prediction_gives_unit_leakage() {
        let scenes: Vec<_> = [(vec![2, 5], 1), (vec![1, 1, 3], 2), (vec![6, 2, 2, 1], 0)]
            .into_iter()
            .enumerate()
            .map(|(i, (c, s))| generate_scene(&SceneSpec::new(c, s, i as u64)).unwrap())
            .collect();
        let preds: Vec<f64> = scenes.iter().map(|s| s.total_count as f64).collect();
        assert!((leakage(&scenes, &preds).unwrap() - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mae_is_permutation_invariant(
            pairs in prop::collection::vec((-50f64..50.0, -50f64..50.0), 1..30),
            rot in 0usize..30,
        ) {
            let (p, g): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let mut rotated = pairs.clone();
            rotated.rotate_left(rot % pairs.len());
            let (rp, rg): (Vec<f64>, Vec<f64>) = rotated.into_iter().unzip();
            prop_assert!((mae(&p, &g).unwrap() - mae(&rp, &rg).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn translation_consistent_and_rmse_dominates(
            pairs in prop::collection::vec((-50f64..50.0, -50f64..50.0), 1..30),
            shift in -100f64..100.0,
        ) {
            let (p, g): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let ps: Vec<f64> = p.iter().map(|v| v + shift).collect();
            let gs: Vec<f64> = g.iter().map(|v| v + shift).collect();
            prop_assert!((mae(&p, &g).unwrap() - mae(&ps, &gs).unwrap()).abs() < 1e-9);
            prop_assert!((rmse(&p, &g).unwrap() - rmse(&ps, &gs).unwrap()).abs() < 1e-9);
            prop_assert!(rmse(&p, &g).unwrap() >= mae(&p, &g).unwrap() * (1.0 - 1e-12));
        }
    }
}
