use rand::seq::SliceRandom;
use rand::Rng;

use super::CircuitError;
use crate::directory::{DirectorySnapshot, RelayDescriptor, Role};

pub const MIN_PATH_LEN: usize = 1;
pub const MAX_PATH_LEN: usize = crate::onion::MAX_HOPS;

/// Rejection-sampling attempts before falling back to enumeration.
const REJECTION_ATTEMPTS: usize = 4096;

fn position_ok(relay: &RelayDescriptor, pos: usize, n: usize) -> bool {
    let mut ok = true;
    if pos == 0 {
        ok &= relay.has_role(Role::Entry);
    }
    if pos == n - 1 {
        ok &= relay.has_role(Role::Exit);
    }
    if pos != 0 && pos != n - 1 {
        ok &= relay.has_role(Role::Middle);
    }
    ok
}

/// Pick `n` distinct relays: the first ENTRY-capable, the last EXIT-capable,
/// the rest MIDDLE-capable. Every valid path is equally likely.
pub fn select_path<R: Rng + ?Sized>(
    snapshot: &DirectorySnapshot,
    n: usize,
    rng: &mut R,
) -> Result<Vec<RelayDescriptor>, CircuitError> {
    if !(MIN_PATH_LEN..=MAX_PATH_LEN).contains(&n) {
        return Err(CircuitError::PathLength(n));
    }
    let relays = &snapshot.relays;
    if relays.len() < n {
        return Err(CircuitError::InsufficientRelays {
            need: n,
            have: relays.len(),
        });
    }
    // A uniformly random ordered n-subset, kept only if it satisfies the role
    // constraints, is a uniform draw over valid paths.
    let mut indices: Vec<usize> = (0..relays.len()).collect();
    for _ in 0..REJECTION_ATTEMPTS {
        let (chosen, _) = indices.partial_shuffle(rng, n);
        if chosen
            .iter()
            .enumerate()
            .all(|(pos, &i)| position_ok(&relays[i], pos, n))
        {
            return Ok(chosen.iter().map(|&i| relays[i].clone()).collect());
        }
    }
    // Valid paths are rare; enumerate them and draw one.
    let paths = enumerate_paths(snapshot, n);
    paths
        .choose(rng)
        .map(|p| p.iter().map(|&i| relays[i].clone()).collect())
        .ok_or(CircuitError::InsufficientRelays {
            need: n,
            have: relays.len(),
        })
}

/// Every valid path as relay indices into the snapshot.
pub fn enumerate_paths(snapshot: &DirectorySnapshot, n: usize) -> Vec<Vec<usize>> {
    fn go(
        relays: &[RelayDescriptor],
        n: usize,
        cur: &mut Vec<usize>,
        used: &mut Vec<bool>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        let pos = cur.len();
        for i in 0..relays.len() {
            if !used[i] && position_ok(&relays[i], pos, n) {
                used[i] = true;
                cur.push(i);
                go(relays, n, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    if n == 0 || snapshot.relays.len() < n {
        return out;
    }
    go(
        &snapshot.relays,
        n,
        &mut Vec::new(),
        &mut vec![false; snapshot.relays.len()],
        &mut out,
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directory::all_roles;
    use crate::onion::IdentityKeypair;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use std::collections::{HashMap, HashSet};

    fn relay(roles: &[Role]) -> RelayDescriptor {
        let id = IdentityKeypair::generate();
        RelayDescriptor {
            relay_id: id.relay_id(),
            address: "127.0.0.1:1".into(),
            roles: roles.iter().copied().collect(),
            public_key: id.public_bytes(),
            registered_at: 0,
        }
    }

    fn snapshot(relays: Vec<RelayDescriptor>) -> DirectorySnapshot {
        DirectorySnapshot {
            relays,
            issued_at: 0,
        }
    }

    fn all() -> Vec<Role> {
        all_roles().into_iter().collect()
    }

    #[test]
    fn three_of_three_is_a_permutation() {
        let snap = snapshot((0..3).map(|_| relay(&all())).collect());
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..50 {
            let path = select_path(&snap, 3, &mut rng).unwrap();
            let ids: HashSet<_> = path.iter().map(|r| r.relay_id).collect();
            assert_eq!(ids.len(), 3);
        }
    }

    #[test]
    fn lone_exit_is_always_last() {
        let exit = relay(&[Role::Exit]);
        let mut relays: Vec<_> = (0..4).map(|_| relay(&[Role::Entry, Role::Middle])).collect();
        relays.push(exit.clone());
        let snap = snapshot(relays);
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..200 {
            let path = select_path(&snap, 3, &mut rng).unwrap();
            assert_eq!(path[2].relay_id, exit.relay_id);
        }
    }

    #[test]
    fn insufficient_relays() {
        let snap = snapshot((0..2).map(|_| relay(&all())).collect());
        let mut rng = StdRng::seed_from_u64(3);
        assert!(matches!(
            select_path(&snap, 3, &mut rng),
            Err(CircuitError::InsufficientRelays { need: 3, have: 2 })
        ));
        // Enough relays but no exit.
        let snap = snapshot((0..4).map(|_| relay(&[Role::Entry, Role::Middle])).collect());
        assert!(select_path(&snap, 3, &mut rng).is_err());
    }

    #[test]
    fn path_length_bounds() {
        let snap = snapshot((0..10).map(|_| relay(&all())).collect());
        let mut rng = StdRng::seed_from_u64(4);
        assert!(matches!(select_path(&snap, 0, &mut rng), Err(CircuitError::PathLength(0))));
        assert!(matches!(select_path(&snap, 9, &mut rng), Err(CircuitError::PathLength(9))));
        assert_eq!(select_path(&snap, 8, &mut rng).unwrap().len(), 8);
    }

    #[test]
    fn single_hop_needs_entry_and_exit() {
        let both = relay(&[Role::Entry, Role::Exit]);
        let snap = snapshot(vec![relay(&[Role::Entry]), relay(&[Role::Exit]), both.clone()]);
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            assert_eq!(select_path(&snap, 1, &mut rng).unwrap()[0].relay_id, both.relay_id);
        }
    }

    #[test]
    fn seeded_selection_is_deterministic() {
        let snap = snapshot((0..6).map(|_| relay(&all())).collect());
        let a = select_path(&snap, 3, &mut StdRng::seed_from_u64(9)).unwrap();
        let b = select_path(&snap, 3, &mut StdRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn enumeration_fallback_finds_rare_paths() {
        // Valid 3-paths are a tiny fraction of ordered triples.
        let entry = relay(&[Role::Entry]);
        let middle = relay(&[Role::Middle]);
        let exit = relay(&[Role::Exit]);
        let mut relays = vec![entry, middle.clone(), exit.clone()];
        relays.extend((0..60).map(|_| relay(&[Role::Entry])));
        let snap = snapshot(relays);
        let paths = enumerate_paths(&snap, 3);
        // entry candidates: 61, middle: 1, exit: 1
        assert_eq!(paths.len(), 61);
        let p = select_path(&snap, 3, &mut StdRng::seed_from_u64(6)).unwrap();
        assert_eq!(p[1].relay_id, middle.relay_id);
        assert_eq!(p[2].relay_id, exit.relay_id);
    }

    /// Chi-square and per-path deviation check of uniformity over all 120
    /// ordered 3-paths from 6 all-role relays. The per-path bound is 4.5 sigma,
    /// a Bonferroni-corrected two-sided 0.1% level across 120 cells.
    #[test]
    fn uniform_over_enumerated_paths() {
        let snap = snapshot((0..6).map(|_| relay(&all())).collect());
        let paths = enumerate_paths(&snap, 3);
        assert_eq!(paths.len(), 120);
        let index_of: HashMap<_, _> = snap
            .relays
            .iter()
            .enumerate()
            .map(|(i, r)| (r.relay_id, i))
            .collect();
        let mut counts: HashMap<Vec<usize>, u32> = paths.iter().map(|p| (p.clone(), 0)).collect();
        let mut rng = StdRng::seed_from_u64(20);
        let draws = 10_000u32;
        for _ in 0..draws {
            let p = select_path(&snap, 3, &mut rng).unwrap();
            let key: Vec<usize> = p.iter().map(|r| index_of[&r.relay_id]).collect();
            *counts.get_mut(&key).expect("drawn path is valid") += 1;
        }
        let k = paths.len() as f64;
        let expected = draws as f64 / k;
        let sigma = (draws as f64 * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
        let mut chi2 = 0.0;
        for (path, &c) in &counts {
            let dev = (c as f64 - expected).abs();
            assert!(dev <= 4.5 * sigma, "path {path:?}: {c} vs {expected:.1} (sigma={sigma:.1})");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // Upper 0.1% point of chi-square with 119 degrees of freedom
        // (scipy.stats.chi2.ppf(0.999, 119)).
        assert!(chi2 < 172.42, "chi2 = {chi2}");
    }
}
