use log::{debug, warn};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geocode::{GeoPoint, SpatialIndex};

/// Negatives drawn per evaluation instance.
pub const EVAL_NEGATIVES: usize = 100;
/// Size of the nearest-neighbour pool evaluation negatives come from.
pub const EVAL_POOL: usize = 2000;

fn draw(pool: &[usize], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Draws `EVAL_NEGATIVES` POIs uniformly without replacement from the
/// `EVAL_POOL` POIs nearest to `prev`, excluding `target`.
///
/// When the pool holds too few candidates the full registry is used; when
/// even the registry is too small every other POI is returned.
pub fn sample_eval_negatives(
    index: &SpatialIndex,
    prev: GeoPoint,
    target: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let n = index.len();
    let mut pool = index.k_nearest(prev, EVAL_POOL.min(n))?;
    pool.retain(|&p| p != target);
    if pool.len() >= EVAL_NEGATIVES {
        return Ok(draw(&pool, EVAL_NEGATIVES, rng));
    }
    let others: Vec<usize> = (0..n).filter(|&p| p != target).collect();
    if others.len() >= EVAL_NEGATIVES {
        warn!("nearest-neighbour pool too small; sampling negatives from the full registry");
        return Ok(draw(&others, EVAL_NEGATIVES, rng));
    }
    debug!("registry holds only {} other POIs; using all as negatives", others.len());
    Ok(others)
}

/// Draws `k` POIs uniformly from the whole registry of `num_pois`,
/// excluding `exclude`; without replacement when enough exist.
pub fn sample_other_negatives(num_pois: usize, exclude: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..num_pois).filter(|&p| p != exclude).collect();
    if pool.is_empty() && k > 0 {
        return Err(Error::invalid("registry has no POI besides the target"));
    }
    if pool.len() >= k {
        return Ok(draw(&pool, k, rng));
    }
    Ok((0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
}

/// Draws `k` POIs the user never visited, excluding `target`. `visited`
/// is indexed by POI id. Falls back to sampling with replacement when
/// fewer than `k` candidates exist, and to every POI but the target when
/// the user visited them all.
pub fn sample_train_negatives(
    visited: &[bool],
    target: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut pool: Vec<usize> = (0..visited.len())
        .filter(|&p| !visited[p] && p != target)
        .collect();
    if pool.is_empty() {
        debug!("user visited every POI; drawing negatives from all but the target");
        pool = (0..visited.len()).filter(|&p| p != target).collect();
    }
    if pool.is_empty() && k > 0 {
        return Err(Error::invalid("registry has no POI besides the target"));
    }
    if pool.len() >= k {
        return Ok(draw(&pool, k, rng));
    }
    debug!("only {} unvisited POIs for {k} negatives; sampling with replacement", pool.len());
    Ok((0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn train_negatives_forced_set() {
        let mut visited = vec![true; 20];
        for p in [3, 7, 11] {
            visited[p] = false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut neg = sample_train_negatives(&visited, 0, 3, &mut rng).unwrap();
        neg.sort_unstable();
        assert_eq!(neg, [3, 7, 11]);
        let neg = sample_train_negatives(&visited, 0, 5, &mut rng).unwrap();
        assert_eq!(neg.len(), 5);
        assert!(neg.iter().all(|p| [3, 7, 11].contains(p)));
        assert_eq!(sample_train_negatives(&[true, true], 0, 2, &mut rng).unwrap(), vec![1, 1]);
        assert!(sample_train_negatives(&[true], 0, 1, &mut rng).is_err());
        let mut other = sample_other_negatives(4, 2, 3, &mut rng).unwrap();
        other.sort_unstable();
        assert_eq!(other, [0, 1, 3]);
        assert!(sample_other_negatives(6, 5, 40, &mut rng).unwrap().iter().all(|&p| p < 5));
    }

    #[test]
    fn eval_negatives_small_registry() {
        let coords: Vec<GeoPoint> = (0..101)
            .map(|i| GeoPoint::new(0.01 * i as f64, 0.0).unwrap())
            .collect();
        let index = SpatialIndex::from_registry(&coords).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut neg = sample_eval_negatives(&index, coords[0], 50, &mut rng).unwrap();
        neg.sort_unstable();
        let expected: Vec<usize> = (0..101).filter(|&p| p != 50).collect();
        assert_eq!(neg, expected);
    }

    #[test]
    fn train_negatives_are_uniform_and_exclude_target() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        // 20-POI registry, POIs 0..5 visited, target 7 is unvisited.
        let visited: Vec<bool> = (0..20).map(|p| p < 5).collect();
        let pool: Vec<usize> = (5..20).filter(|&p| p != 7).collect();
        let mut counts = [0f64; 20];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let neg = sample_train_negatives(&visited, 7, 1, &mut rng).unwrap();
            counts[neg[0]] += 1.0;
        }
        assert_eq!(counts[7], 0.0);
        assert!(counts[..5].iter().all(|&c| c == 0.0));
        let expected = 10_000.0 / pool.len() as f64;
        let stat: f64 = pool.iter().map(|&p| (counts[p] - expected).powi(2) / expected).sum();
        let p_value = 1.0 - ChiSquared::new((pool.len() - 1) as f64).unwrap().cdf(stat);
        assert!(p_value > 0.01, "chi-square {stat:.2}, p = {p_value:.4}");
    }
}
