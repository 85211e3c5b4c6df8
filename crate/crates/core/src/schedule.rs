//! Precompiled per-timestep architecture schedules.
//!
//! Width decisions depend only on the timestep, so for a fixed set of
//! weights every decision the width routers will make along a sampling
//! trajectory can be computed once, stored as bitmasks, and replayed at
//! sampling time without running the routers at all. A schedule carries the
//! fingerprint of the weights it was compiled from and refuses to drive
//! anything else. It stores exactly the timesteps the sampler will visit, in
//! visit order (strictly decreasing).
//!
//! Text format, one entry per (timestep, layer):
//!
//! ```text
//! DYDIT-SCHEDULE v1 <16-hex-digit fingerprint> steps=<count>
//! t=50 layer=0 head=f channel=b
//! t=50 layer=1 head=3 channel=f
//! t=49 layer=0 head=d channel=b
//! ...
//! ```
//!
//! `head` and `channel` are lowercase hex words; bit `u` set means unit `u`
//! is active. Unit counts are capped at 64 per layer by the model
//! configuration, so one word always suffices.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::dit::{DitModel, WidthKind};
use crate::error::{DyError, Result};
use crate::routing::ProtectionIndex;

/// Active-unit bitmasks for one layer at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerChoice {
    /// Bit h set: attention head h runs.
    pub heads: u64,
    /// Bit g set: MLP channel group g runs.
    pub channels: u64,
}

impl LayerChoice {
    pub fn active_heads(&self) -> Vec<usize> {
        (0..64).filter(|&i| self.heads >> i & 1 == 1).collect()
    }

    pub fn active_channels(&self) -> Vec<usize> {
        (0..64).filter(|&i| self.channels >> i & 1 == 1).collect()
    }
}

/// Frozen width decisions for one sampling trajectory: all layers at each
/// visited timestep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSchedule {
    fingerprint: u64,
    /// Visit order: strictly decreasing timesteps.
    timesteps: Vec<usize>,
    /// Indexed `[step][layer]`, parallel to `timesteps`.
    entries: Vec<Vec<LayerChoice>>,
}

fn bits_from(units: &[usize]) -> u64 {
    units.iter().fold(0u64, |acc, &u| acc | 1 << u)
}

fn check_grid(grid: &[usize]) -> Result<()> {
    if grid.is_empty() {
        return Err(DyError::invalid("schedule needs at least one timestep"));
    }
    if grid.contains(&0) {
        return Err(DyError::invalid("timesteps start at 1"));
    }
    for w in grid.windows(2) {
        if w[0] <= w[1] {
            return Err(DyError::invalid(format!(
                "timesteps must strictly decrease, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

impl ArchitectureSchedule {
    /// Run the width routers at every timestep of `grid` (the sampler's
    /// visit order, strictly decreasing) and freeze the decisions.
    pub fn compile(
        model: &DitModel,
        protection: &ProtectionIndex,
        grid: &[usize],
    ) -> Result<Self> {
        check_grid(grid)?;
        let mut entries = Vec::with_capacity(grid.len());
        for &t in grid {
            let widths = model.resolve_widths(t, WidthKind::Routed(protection))?;
            entries.push(
                widths
                    .iter()
                    .map(|(h, g)| LayerChoice {
                        heads: bits_from(h),
                        channels: bits_from(g),
                    })
                    .collect(),
            );
        }
        Ok(ArchitectureSchedule {
            fingerprint: model.fingerprint(),
            timesteps: grid.to_vec(),
            entries,
        })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Visited timesteps in visit order (strictly decreasing).
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn layers(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }

    fn index_of(&self, t: usize) -> Result<usize> {
        self.timesteps
            .iter()
            .position(|&x| x == t)
            .ok_or_else(|| DyError::invalid(format!("schedule has no entry for timestep {t}")))
    }

    /// Error unless every timestep of `grid` has a frozen entry.
    pub fn covers(&self, grid: &[usize]) -> Result<()> {
        for &t in grid {
            self.index_of(t)?;
        }
        Ok(())
    }

    pub fn choice(&self, t: usize, layer: usize) -> Result<LayerChoice> {
        let idx = self.index_of(t)?;
        self.entries[idx]
            .get(layer)
            .copied()
            .ok_or_else(|| DyError::invalid(format!("layer {layer} out of range")))
    }

    /// Per-layer active unit lists for one timestep, in the shape
    /// [`DitModel::slice_blocks`] expects.
    pub fn active_units(&self, t: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let idx = self.index_of(t)?;
        Ok(self.entries[idx]
            .iter()
            .map(|c| (c.active_heads(), c.active_channels()))
            .collect())
    }

    /// Smallest head and channel popcount over every (timestep, layer).
    pub fn min_popcounts(&self) -> (u32, u32) {
        let mut heads = u32::MAX;
        let mut channels = u32::MAX;
        for row in &self.entries {
            for c in row {
                heads = heads.min(c.heads.count_ones());
                channels = channels.min(c.channels.count_ones());
            }
        }
        (heads, channels)
    }

    /// Error unless this schedule was compiled from exactly these weights.
    pub fn check_model(&self, model: &DitModel) -> Result<()> {
        let fp = model.fingerprint();
        if fp != self.fingerprint {
            return Err(DyError::FingerprintMismatch {
                schedule: format!("{:016x}", self.fingerprint),
                model: format!("{fp:016x}"),
            });
        }
        if self.layers() != model.config.layers {
            return Err(DyError::ConfigMismatch {
                field: "layers",
                expected: self.layers().to_string(),
                found: model.config.layers.to_string(),
            });
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "DYDIT-SCHEDULE v1 {:016x} steps={}",
            self.fingerprint,
            self.timesteps.len()
        )?;
        for (i, row) in self.entries.iter().enumerate() {
            for (layer, c) in row.iter().enumerate() {
                writeln!(
                    w,
                    "t={} layer={} head={:x} channel={:x}",
                    self.timesteps[i], layer, c.heads, c.channels
                )?;
            }
        }
        Ok(())
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        self.save(std::fs::File::create(path)?)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let fail = |msg: String| DyError::format("schedule", msg);
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| fail("empty file".into()))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "DYDIT-SCHEDULE" || parts[1] != "v1" {
            return Err(fail(format!("bad header `{header}`")));
        }
        if parts[2].len() != 16 {
            return Err(fail(format!("bad fingerprint `{}`", parts[2])));
        }
        let fingerprint = u64::from_str_radix(parts[2], 16)
            .map_err(|_| fail(format!("bad fingerprint `{}`", parts[2])))?;
        let steps: usize = parts[3]
            .strip_prefix("steps=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fail(format!("bad step count `{}`", parts[3])))?;
        if steps == 0 {
            return Err(fail("step count must be positive".into()));
        }

        let mut flat: Vec<(usize, usize, LayerChoice)> = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut t = None;
            let mut layer = None;
            let mut head = None;
            let mut channel = None;
            for field in line.split_whitespace() {
                let (key, value) = field
                    .split_once('=')
                    .ok_or_else(|| fail(format!("bad field `{field}`")))?;
                match key {
                    "t" => t = value.parse::<usize>().ok(),
                    "layer" => layer = value.parse::<usize>().ok(),
                    "head" => head = u64::from_str_radix(value, 16).ok(),
                    "channel" => channel = u64::from_str_radix(value, 16).ok(),
                    _ => return Err(fail(format!("unknown field `{key}`"))),
                }
                if t.is_none() && key == "t" || layer.is_none() && key == "layer"
                    || head.is_none() && key == "head" || channel.is_none() && key == "channel"
                {
                    return Err(fail(format!("bad value in `{field}`")));
                }
            }
            match (t, layer, head, channel) {
                (Some(t), Some(l), Some(h), Some(c)) => {
                    flat.push((t, l, LayerChoice { heads: h, channels: c }))
                }
                _ => return Err(fail(format!("incomplete entry `{line}`"))),
            }
        }
        if flat.is_empty() {
            return Err(fail("no entries".into()));
        }
        let first_t = flat[0].0;
        let layers = flat.iter().take_while(|(t, _, _)| *t == first_t).count();
        if flat.len() != steps * layers {
            return Err(fail(format!(
                "expected {steps} timesteps x {layers} layers, found {} entries",
                flat.len()
            )));
        }
        let mut timesteps = Vec::with_capacity(steps);
        let mut entries: Vec<Vec<LayerChoice>> = Vec::with_capacity(steps);
        for (i, (t, l, c)) in flat.into_iter().enumerate() {
            let (group, want_l) = (i / layers, i % layers);
            if l != want_l {
                return Err(fail(format!(
                    "entry {i}: got layer={l}, expected layer={want_l}"
                )));
            }
            if want_l == 0 {
                if t == 0 {
                    return Err(fail("timesteps start at 1".into()));
                }
                if let Some(&prev) = timesteps.last() {
                    if t >= prev {
                        return Err(fail(format!(
                            "timesteps must strictly decrease, got {prev} then {t}"
                        )));
                    }
                }
                timesteps.push(t);
                entries.push(Vec::with_capacity(layers));
            } else if t != timesteps[group] {
                return Err(fail(format!(
                    "entry {i}: timestep changed mid-group (t={t} in group t={})",
                    timesteps[group]
                )));
            }
            if c.heads == 0 || c.channels == 0 {
                return Err(fail(format!(
                    "t={t} layer={l}: a layer cannot have zero active units"
                )));
            }
            entries[group].push(c);
        }
        Ok(ArchitectureSchedule {
            fingerprint,
            timesteps,
            entries,
        })
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        Self::load(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ddim_timesteps;
    use crate::dit::ModelConfig;
    use crate::numerics::Tensor;

    fn small_model(seed: u64) -> DitModel {
        let cfg = ModelConfig {
            layers: 2,
            channels: 16,
            heads: 4,
            patch: 4,
            extent: 8,
            image_channels: 3,
            classes: 4,
        };
        DitModel::init(cfg, seed).unwrap()
    }

    fn spread_biases(model: &mut DitModel, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for b in &mut model.blocks {
            let mk = |units: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                Tensor::from_vec(
                    &[1, units],
                    (0..units).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
                )
                .unwrap()
                .with_requires_grad(true)
            };
            b.router_head.bias = mk(4, &mut rng);
            b.router_channel.bias = mk(4, &mut rng);
        }
    }

    fn full_grid(t: usize) -> Vec<usize> {
        (1..=t).rev().collect()
    }

    #[test]
    fn compiled_schedule_matches_live_routing_on_its_grid() {
        let mut model = small_model(3);
        spread_biases(&mut model, 5);
        let protection = model.rank_protection().unwrap();
        let grid = ddim_timesteps(50, 10).unwrap();
        let schedule = ArchitectureSchedule::compile(&model, &protection, &grid).unwrap();
        assert_eq!(schedule.timesteps(), &grid[..]);
        assert_eq!(schedule.steps(), 10);
        for &t in &grid {
            let live = model
                .resolve_widths(t, WidthKind::Routed(&protection))
                .unwrap();
            assert_eq!(schedule.active_units(t).unwrap(), live, "t={t}");
        }
        // Unvisited timesteps have no entry.
        assert!(schedule.active_units(3).is_err());
        assert!(schedule.covers(&grid).is_ok());
        assert!(schedule.covers(&[50, 3]).is_err());
    }

    #[test]
    fn compile_rejects_bad_grids() {
        let model = small_model(4);
        let protection = model.rank_protection().unwrap();
        for grid in [&[][..], &[3, 3][..], &[3, 5][..], &[2, 1, 0][..]] {
            assert!(
                ArchitectureSchedule::compile(&model, &protection, grid).is_err(),
                "accepted grid {grid:?}"
            );
        }
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let mut model = small_model(7);
        spread_biases(&mut model, 9);
        let protection = model.rank_protection().unwrap();
        let schedule =
            ArchitectureSchedule::compile(&model, &protection, &full_grid(25)).unwrap();
        let mut buf = Vec::new();
        schedule.save(&mut buf).unwrap();
        let loaded = ArchitectureSchedule::load(&buf[..]).unwrap();
        assert_eq!(schedule, loaded);
        let mut buf2 = Vec::new();
        loaded.save(&mut buf2).unwrap();
        assert_eq!(buf, buf2, "serialization must be stable");
    }

    #[test]
    fn format_example_is_frozen() {
        let schedule = ArchitectureSchedule {
            fingerprint: 0x0123456789abcdef,
            timesteps: vec![40, 20],
            entries: vec![
                vec![
                    LayerChoice { heads: 0xf, channels: 0xb },
                    LayerChoice { heads: 0x3, channels: 0x1 },
                ],
                vec![
                    LayerChoice { heads: 0x5, channels: 0xf },
                    LayerChoice { heads: 0x1, channels: 0x2 },
                ],
            ],
        };
        let mut buf = Vec::new();
        schedule.save(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "DYDIT-SCHEDULE v1 0123456789abcdef steps=2\n\
             t=40 layer=0 head=f channel=b\n\
             t=40 layer=1 head=3 channel=1\n\
             t=20 layer=0 head=5 channel=f\n\
             t=20 layer=1 head=1 channel=2\n"
        );
        // Bit 0 is unit 0: 0xb keeps channels {0, 1, 3}.
        let c = schedule.choice(40, 0).unwrap();
        assert_eq!(c.active_channels(), vec![0, 1, 3]);
        assert_eq!(schedule.min_popcounts(), (1, 1));
    }

    #[test]
    fn schedules_refuse_foreign_models() {
        let model_a = small_model(11);
        let model_b = small_model(12);
        let protection = model_a.rank_protection().unwrap();
        let schedule =
            ArchitectureSchedule::compile(&model_a, &protection, &full_grid(10)).unwrap();
        assert!(schedule.check_model(&model_a).is_ok());
        let err = schedule.check_model(&model_b).unwrap_err();
        assert!(matches!(err, DyError::FingerprintMismatch { .. }));
    }

    #[test]
    fn protection_floor_survives_hostile_routers() {
        let mut model = small_model(13);
        for b in &mut model.blocks {
            b.router_head.bias = Tensor::full(&[1, 4], -10.0).unwrap().with_requires_grad(true);
            b.router_channel.bias = Tensor::full(&[1, 4], -10.0).unwrap().with_requires_grad(true);
        }
        let protection = model.rank_protection().unwrap();
        let schedule =
            ArchitectureSchedule::compile(&model, &protection, &full_grid(250)).unwrap();
        assert_eq!(schedule.steps(), 250);
        let (h, c) = schedule.min_popcounts();
        assert!(h >= 1 && c >= 1, "popcounts fell to ({h}, {c})");
    }

    #[test]
    fn malformed_schedules_are_rejected() {
        let cases: &[&str] = &[
            "",
            "WRONG v1 0000000000000000 steps=1\nt=1 layer=0 head=1 channel=1\n",
            "DYDIT-SCHEDULE v2 0000000000000000 steps=1\nt=1 layer=0 head=1 channel=1\n",
            "DYDIT-SCHEDULE v1 zzzz steps=1\nt=1 layer=0 head=1 channel=1\n",
            "DYDIT-SCHEDULE v1 0000000000000000 steps=0\n",
            "DYDIT-SCHEDULE v1 0000000000000000 steps=1\n",
            "DYDIT-SCHEDULE v1 0000000000000000 steps=2\nt=2 layer=0 head=1 channel=1\n",
            "DYDIT-SCHEDULE v1 0000000000000000 steps=1\nt=1 layer=0 head=0 channel=1\n",
            "DYDIT-SCHEDULE v1 0000000000000000 steps=1\nt=1 layer=0 head=q channel=1\n",
            "DYDIT-SCHEDULE v1 0000000000000000 steps=1\nt=0 layer=0 head=1 channel=1\n",
            "DYDIT-SCHEDULE v1 0000000000000000 steps=2\nt=1 layer=0 head=1 channel=1\nt=2 layer=0 head=1 channel=1\n",
            "DYDIT-SCHEDULE v1 0000000000000000 steps=2\nt=2 layer=0 head=1 channel=1\nt=2 layer=0 head=1 channel=1\n",
            "DYDIT-SCHEDULE v1 0000000000000000 steps=2\nt=2 layer=1 head=1 channel=1\nt=1 layer=0 head=1 channel=1\n",
            "DYDIT-SCHEDULE v1 0000000000000000 steps=2\nt=2 layer=0 head=1 channel=1\nt=1 layer=0 head=1 channel=1\nt=1 layer=1 head=1 channel=1\n",
        ];
        for case in cases {
            assert!(
                ArchitectureSchedule::load(case.as_bytes()).is_err(),
                "accepted malformed input: {case:?}"
            );
        }
    }
}
