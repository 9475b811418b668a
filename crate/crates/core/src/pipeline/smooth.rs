//! Exponential smoothing of contacts tracked across frames.

use super::ContactEvent;

/// A contact continues a track when its x3D lies within this distance, mm.
pub const TRACK_GATE_MM: f64 = 20.0;

#[derive(Debug, Clone)]
pub struct Smoother {
    alpha: f64,
    tracks: Vec<ContactEvent>,
}

fn ema(state: &mut f64, new: f64, alpha: f64) {
    *state = alpha * new + (1.0 - alpha) * *state;
}

impl Smoother {
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
        Self { alpha, tracks: Vec::new() }
    }

    /// Smooth one frame's events. Tracks not continued in this frame end.
    pub fn update(&mut self, events: &[ContactEvent]) -> Vec<ContactEvent> {
        let mut taken = vec![false; self.tracks.len()];
        let mut next = Vec::with_capacity(events.len());
        for e in events {
            let nearest = self
                .tracks
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .map(|(i, t)| (i, (t.location[0] - e.location[0]).abs()))
                .filter(|(_, d)| *d <= TRACK_GATE_MM)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let out = match nearest {
                Some((i, _)) => {
                    taken[i] = true;
                    let mut s = self.tracks[i].clone();
                    let a = self.alpha;
                    for k in 0..3 {
                        ema(&mut s.location[k], e.location[k], a);
                    }
                    s.force = match (s.force, e.force) {
                        (Some(mut f), Some(g)) => {
                            for k in 0..3 {
                                ema(&mut f[k], g[k], a);
                            }
                            Some(f)
                        }
                        (_, g) => g,
                    };
                    for (p, q) in [
                        (&mut s.raw.x2d, e.raw.x2d),
                        (&mut s.raw.y2d, e.raw.y2d),
                        (&mut s.raw.ds1, e.raw.ds1),
                        (&mut s.raw.ds2, e.raw.ds2),
                        (&mut s.raw.dn, e.raw.dn),
                        (&mut s.raw.dpf, e.raw.dpf),
                    ] {
                        ema(p, q, a);
                    }
                    s.frame = e.frame;
                    s.ts_s = e.ts_s;
                    s.bbox = e.bbox;
                    s
                }
                None => e.clone(),
            };
            next.push(out);
        }
        self.tracks = next.clone();
        next
    }
}
