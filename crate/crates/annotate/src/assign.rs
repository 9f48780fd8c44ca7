//! Seeded, load-balanced assignment of images to volunteers.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smoothbench::ImageId;

use crate::ServiceError;

/// Volunteer id → assigned image ids in ascending order.
pub type Assignment = BTreeMap<String, Vec<ImageId>>;

/// Gives every image `per_image` distinct volunteers. Images are visited in
/// the given order; each takes the least-loaded volunteers, with a seeded
/// shuffle deciding among equally loaded ones.
pub fn assign(images: &[ImageId], volunteers: &[String], per_image: usize, seed: u64) -> Result<Assignment, ServiceError> {
    if per_image == 0 || per_image > volunteers.len() {
        return Err(ServiceError::Config(format!(
            "{} volunteers cannot cover {per_image} votes per image",
            volunteers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut load = vec![0usize; volunteers.len()];
    let mut out: Assignment = volunteers.iter().map(|v| (v.clone(), Vec::new())).collect();
    for &t in images {
        let mut order: Vec<usize> = (0..volunteers.len()).collect();
        order.shuffle(&mut rng);
        order.sort_by_key(|&i| load[i]);
        for &i in &order[..per_image] {
            load[i] += 1;
            out.get_mut(&volunteers[i]).expect("registered").push(t);
        }
    }
    for ids in out.values_mut() {
        ids.sort_unstable();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("v{i:02}")).collect()
    }

    #[test]
    fn four_images_two_votes_eight_volunteers() {
        let a = assign(&[0, 1, 2, 3], &names(8), 2, 9).unwrap();
        for t in 0..4 {
            assert_eq!(a.values().filter(|ids| ids.contains(&t)).count(), 2);
        }
        for ids in a.values() {
            let mut d = ids.clone();
            d.dedup();
            assert_eq!(&d, ids);
            assert!(ids.len() <= 1);
        }
        assert_eq!(a, assign(&[0, 1, 2, 3], &names(8), 2, 9).unwrap());
    }

    #[test]
    fn load_is_balanced() {
        let images: Vec<ImageId> = (0..500).collect();
        let a = assign(&images, &names(100), 14, 1).unwrap();
        let loads: Vec<usize> = a.values().map(Vec::len).collect();
        assert_eq!(loads.iter().sum::<usize>(), 7000);
        assert!(loads.iter().all(|&l| l == 70));
    }

    #[test]
    fn too_few_volunteers() {
        assert!(assign(&[0], &names(3), 4, 0).is_err());
    }
}
