//! Perching demos: picking the stiffer of two perches and mapping rods in
//! the world frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::smooth::TRACK_GATE_MM;
use super::ContactEvent;
use crate::geometry::{sensor_to_global, Pose, RigidTransform};

/// Rod detections closer than this in (X, Z) are merged, m.
pub const MAP_CLUSTER_M: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum DemoError {
    #[error("need two contacts with force over {needed} frames, found {found} usable tracks")]
    InsufficientContacts { needed: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Front,
    Rear,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceDecision {
    pub side: Side,
    /// x3D of the stiffer contact, mm; absent when ambiguous.
    pub target_x3d: Option<f64>,
    pub front_median_n: f64,
    pub rear_median_n: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Track {
    x: f64,
    frames: Vec<usize>,
    xs: Vec<f64>,
    forces: Vec<f64>,
}

/// Compare the median force magnitude of the front and rear contacts over
/// the hold phase. Medians within `margin` (relative to the larger one)
/// are ambiguous.
pub fn compliance_select(events: &[ContactEvent], n_hold: usize, margin: f64) -> Result<ComplianceDecision, DemoError> {
    let mut tracks: Vec<Track> = Vec::new();
    for e in events {
        let Some(f) = e.force_norm() else { continue };
        let x = e.location[0];
        let hit = tracks
            .iter_mut()
            .filter(|t| (t.x - x).abs() <= TRACK_GATE_MM)
            .min_by(|a, b| (a.x - x).abs().total_cmp(&(b.x - x).abs()));
        match hit {
            Some(t) => {
                t.x = x;
                t.frames.push(e.frame);
                t.xs.push(x);
                t.forces.push(f);
            }
            None => tracks.push(Track {
                x,
                frames: vec![e.frame],
                xs: vec![x],
                forces: vec![f],
            }),
        }
    }
    let mut usable: Vec<Track> = tracks
        .into_iter()
        .filter(|t| {
            let mut fr = t.frames.clone();
            fr.dedup();
            fr.len() >= n_hold
        })
        .collect();
    if usable.len() < 2 {
        return Err(DemoError::InsufficientContacts {
            needed: n_hold,
            found: usable.len(),
        });
    }
    // the two longest tracks are the perches
    usable.sort_by_key(|t| std::cmp::Reverse(t.forces.len()));
    usable.truncate(2);
    usable.sort_by(|a, b| median(a.xs.clone()).total_cmp(&median(b.xs.clone())));
    let rear = median(usable[0].forces.clone());
    let front = median(usable[1].forces.clone());
    let (side, target) = if (front - rear).abs() < margin * front.max(rear) {
        (Side::Ambiguous, None)
    } else if front > rear {
        (Side::Front, Some(median(usable[1].xs.clone())))
    } else {
        (Side::Rear, Some(median(usable[0].xs.clone())))
    };
    Ok(ComplianceDecision {
        side,
        target_x3d: target,
        front_median_n: front,
        rear_median_n: rear,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub ts_s: f64,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RodEstimate {
    /// Global position, m.
    pub x: f64,
    pub z: f64,
    pub detections: usize,
}

/// Transform events to the world frame with the pose nearest in time
/// (within `max_dt_s`) and merge them into rods by proximity.
pub fn build_map(events: &[ContactEvent], poses: &[PoseSample], body: &RigidTransform, max_dt_s: f64) -> Vec<RodEstimate> {
    let mut clusters: Vec<(f64, f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for e in events {
        let nearest = poses
            .iter()
            .min_by(|a, b| (a.ts_s - e.ts_s).abs().total_cmp(&(b.ts_s - e.ts_s).abs()));
        let Some(p) = nearest.filter(|p| (p.ts_s - e.ts_s).abs() <= max_dt_s) else {
            continue;
        };
        let g = sensor_to_global(e.location, &p.pose, body);
        let (x, z) = (g[0], g[2]);
        let hit = clusters
            .iter_mut()
            .map(|c| {
                let d = (c.0 - x).hypot(c.1 - z);
                (d, c)
            })
            .filter(|(d, _)| *d <= MAP_CLUSTER_M)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match hit {
            Some((_, c)) => {
                c.2.push(x);
                c.3.push(z);
                let n = c.2.len() as f64;
                c.0 += (x - c.0) / n;
                c.1 += (z - c.1) / n;
            }
            None => clusters.push((x, z, vec![x], vec![z])),
        }
    }
    let mut rods: Vec<RodEstimate> = clusters
        .into_iter()
        .map(|(_, _, xs, zs)| RodEstimate {
            detections: xs.len(),
            x: median(xs),
            z: median(zs),
        })
        .collect();
    rods.sort_by(|a, b| a.x.total_cmp(&b.x));
    rods
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::RawContact;
    use crate::fields::Rect;
    use nalgebra::Vector3;

    fn event(frame: usize, x: f64, f: f64) -> ContactEvent {
        ContactEvent {
            frame,
            ts_s: frame as f64 / 30.0,
            location: [x, 0.0, 160.0],
            force: Some([0.0, 0.0, -f]),
            raw: RawContact {
                x2d: 0.0,
                y2d: 0.0,
                ds1: 0.0,
                ds2: 0.0,
                dn: 0.0,
                dpf: 0.0,
            },
            bbox: Rect::new(0, 0, 1, 1),
        }
    }

    fn hold(front: f64, rear: f64, frames: usize) -> Vec<ContactEvent> {
        (0..frames).flat_map(|k| [event(k, -60.0, rear), event(k, 60.0, front)]).collect()
    }

    #[test]
    fn stiffer_front_is_selected() {
        let d = compliance_select(&hold(2.0, 1.2, 30), 30, 0.1).unwrap();
        assert_eq!(d.side, Side::Front);
        assert_eq!(d.target_x3d, Some(60.0));
        assert_eq!((d.front_median_n, d.rear_median_n), (2.0, 1.2));
        let d = compliance_select(&hold(1.0, 1.6, 30), 30, 0.1).unwrap();
        assert_eq!((d.side, d.target_x3d), (Side::Rear, Some(-60.0)));
    }

    #[test]
    fn close_medians_are_ambiguous() {
        let d = compliance_select(&hold(1.0, 1.05, 30), 30, 0.1).unwrap();
        assert_eq!(d.side, Side::Ambiguous);
        assert_eq!(d.target_x3d, None);
    }

    #[test]
    fn one_contact_or_short_hold_is_insufficient() {
        let single: Vec<_> = (0..40).map(|k| event(k, 10.0, 1.0)).collect();
        assert!(matches!(compliance_select(&single, 30, 0.1), Err(DemoError::InsufficientContacts { found: 1, .. })));
        assert!(compliance_select(&hold(2.0, 1.0, 29), 30, 0.1).is_err());
    }

    #[test]
    fn identity_pose_maps_straight_through() {
        let poses = [PoseSample {
            ts_s: 0.0,
            pose: Pose::identity(),
        }];
        let mut e = event(0, 0.0, 1.0);
        e.location = [0.0, 0.0, 160.0];
        let rods = build_map(&[e], &poses, &RigidTransform::identity(), 0.04);
        assert_eq!(rods.len(), 1);
        assert!(rods[0].x.abs() < 1e-12 && (rods[0].z - 0.16).abs() < 1e-12);
    }

    #[test]
    fn repeated_detections_form_one_cluster() {
        let poses: Vec<PoseSample> = (0..20)
            .map(|k| PoseSample {
                ts_s: k as f64 / 30.0,
                pose: Pose {
                    position: Vector3::new(0.001 * (k % 3) as f64, 0.0, 0.0),
                    ..Pose::identity()
                },
            })
            .collect();
        let evs: Vec<_> = (0..20).flat_map(|k| [event(k, -50.0, 1.0), event(k, 50.0, 1.0)]).collect();
        let rods = build_map(&evs, &poses, &RigidTransform::identity(), 0.04);
        assert_eq!(rods.len(), 2);
        assert!(rods.iter().all(|r| r.detections == 20));
        assert!((rods[0].x + 0.049).abs() < 1e-9 && (rods[1].x - 0.051).abs() < 1e-9);
    }

    #[test]
    fn events_without_a_nearby_pose_are_skipped() {
        let poses = [PoseSample {
            ts_s: 10.0,
            pose: Pose::identity(),
        }];
        assert!(build_map(&[event(0, 0.0, 1.0)], &poses, &RigidTransform::identity(), 0.04).is_empty());
    }
}
