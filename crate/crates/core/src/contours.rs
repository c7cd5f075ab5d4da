//! Connected regions of the Pitchogram, merging of successive same-pitch
//! regions and per-region pitch ridges.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::Result;
use crate::kernel::ShiftedStack;
use crate::nn::{sigmoid, Model};
use crate::pitchogram::{self, grid_bin_to_cents, PitchogramGrid, TentativeF0, N2_INPUT};

pub const MERGE_CENTS: f64 = 50.0;
/// 130 ms at the output hop, rounded down.
pub const MERGE_GAP_FRAMES: i64 = 22;
pub const BACKWARD_EXTENSION: usize = 30;
pub const N2_HIDDEN: usize = 14;

/// Positive Pitchogram cells forming one (possibly merged) region.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// `(frame, cent bin, activation)`.
    pub cells: Vec<(usize, usize, f64)>,
    pub start: usize,
    pub end: usize,
    /// Activation-weighted mean pitch in absolute cents.
    pub centroid: f64,
}

impl Region {
    pub fn from_cells(cells: Vec<(usize, usize, f64)>) -> Self {
        let mut r = Region {
            cells,
            start: 0,
            end: 0,
            centroid: 0.0,
        };
        r.update();
        r
    }

    fn update(&mut self) {
        self.start = self.cells.iter().map(|c| c.0).min().unwrap_or(0);
        self.end = self.cells.iter().map(|c| c.0).max().unwrap_or(0);
        let (sw, swc) = self
            .cells
            .iter()
            .fold((0.0, 0.0), |(sw, swc), &(_, b, a)| (sw + a, swc + a * grid_bin_to_cents(b as f64)));
        self.centroid = if sw > 0.0 { swc / sw } else { 0.0 };
    }

    fn absorb(&mut self, other: Region) {
        self.cells.extend(other.cells);
        self.update();
    }
}

/// Maximal 8-connected components of the positive cells, ordered by start
/// frame and then by their first cell.
pub fn extract_regions(p: &PitchogramGrid) -> Vec<Region> {
    let (nf, nb) = p.data.dim();
    let mut seen = Array2::<bool>::from_elem((nf, nb), false);
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for i in 0..nf {
        for b in 0..nb {
            if seen[[i, b]] || p.data[[i, b]] <= 0.0 {
                continue;
            }
            seen[[i, b]] = true;
            queue.push_back((i, b));
            let mut cells = Vec::new();
            while let Some((fi, fb)) = queue.pop_front() {
                cells.push((fi, fb, p.data[[fi, fb]]));
                for di in -1i64..=1 {
                    for db in -1i64..=1 {
                        let (ni, nbin) = (fi as i64 + di, fb as i64 + db);
                        if ni < 0 || nbin < 0 || ni >= nf as i64 || nbin >= nb as i64 {
                            continue;
                        }
                        let (ni, nbin) = (ni as usize, nbin as usize);
                        if !seen[[ni, nbin]] && p.data[[ni, nbin]] > 0.0 {
                            seen[[ni, nbin]] = true;
                            queue.push_back((ni, nbin));
                        }
                    }
                }
            }
            cells.sort_by_key(|c| (c.0, c.1));
            regions.push(Region::from_cells(cells));
        }
    }
    regions.sort_by_key(|r| (r.start, r.cells[0].1));
    regions
}

fn mergeable(old: &Region, new: &Region, max_gap: i64) -> bool {
    let gap = new.start as i64 - old.end as i64;
    (0..=max_gap).contains(&gap) && (new.centroid - old.centroid).abs() <= MERGE_CENTS
}

/// Merges, in start order and until nothing changes, every region whose
/// centroid is within 50 cents of an earlier region and which starts 0..=22
/// frames after that region ends.
pub fn merge_regions(regions: Vec<Region>) -> Vec<Region> {
    merge_regions_with(regions, MERGE_GAP_FRAMES)
}

pub fn merge_regions_with(mut regions: Vec<Region>, max_gap: i64) -> Vec<Region> {
    loop {
        regions.sort_by(|a, b| a.start.cmp(&b.start).then(a.centroid.total_cmp(&b.centroid)));
        let mut changed = false;
        let mut i = 0;
        while i < regions.len() {
            let mut j = i + 1;
            while j < regions.len() {
                if mergeable(&regions[i], &regions[j], max_gap) {
                    let r = regions.remove(j);
                    regions[i].absorb(r);
                    changed = true;
                    j = i + 1;
                } else {
                    j += 1;
                }
            }
            i += 1;
        }
        if !changed {
            return regions;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Ridge,
    Interpolated,
    Extrapolated,
}

/// One frame of a contour.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourFrame {
    pub frame: usize,
    /// Fractional Pitchogram bin of the ridge.
    pub bin: f64,
    pub cents: f64,
    /// Pitchogram activation at the ridge (0 where interpolated or extrapolated).
    pub activation: f64,
    pub kind: FrameKind,
    /// Pitch-network output (after the sigmoid) at the ridge pitch.
    pub n2_out: f64,
    pub n2_hidden: [f64; N2_HIDDEN],
}

/// A pitch trajectory defined on every frame from `start` to `end`.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    pub id: usize,
    /// First frame of the region itself (after the backward extension).
    pub region_start: usize,
    pub centroid: f64,
    pub frames: Vec<ContourFrame>,
}

impl Contour {
    pub fn start(&self) -> usize {
        self.frames[0].frame
    }

    pub fn end(&self) -> usize {
        self.frames[self.frames.len() - 1].frame
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Record of an absolute frame, clamped to the span.
    pub fn at(&self, frame: i64) -> &ContourFrame {
        let k = (frame - self.start() as i64).clamp(0, self.frames.len() as i64 - 1);
        &self.frames[k as usize]
    }

    pub fn mean_cents(&self) -> f64 {
        self.frames.iter().map(|f| f.cents).sum::<f64>() / self.frames.len() as f64
    }
}

/// Per-frame ridge of a region: argmax bin (ties toward the centroid, then
/// the lower bin), linear interpolation over empty frames and a backward
/// extension at the first ridge bin, clamped at frame 0. Pitch-network fields
/// are left at zero.
pub fn extract_ridge(region: &Region, id: usize) -> Contour {
    let span = region.end - region.start + 1;
    let mut best: Vec<Option<(usize, f64)>> = vec![None; span];
    let centroid_bin = region.centroid - pitchogram::PITCHOGRAM_MIN_CENTS;
    for &(f, b, a) in &region.cells {
        let slot = &mut best[f - region.start];
        let better = match *slot {
            None => true,
            Some((bb, ba)) => {
                a > ba || (a == ba && {
                    let (d_new, d_old) = ((b as f64 - centroid_bin).abs(), (bb as f64 - centroid_bin).abs());
                    d_new < d_old || (d_new == d_old && b < bb)
                })
            }
        };
        if better {
            *slot = Some((b, a));
        }
    }
    let known: Vec<usize> = (0..span).filter(|&k| best[k].is_some()).collect();
    let mut frames = Vec::with_capacity(span + BACKWARD_EXTENSION);
    let first_bin = best[0].map(|(b, _)| b as f64).unwrap_or(0.0);
    let ext_start = region.start.saturating_sub(BACKWARD_EXTENSION);
    let blank = |frame: usize, bin: f64, activation: f64, kind: FrameKind| ContourFrame {
        frame,
        bin,
        cents: grid_bin_to_cents(bin),
        activation,
        kind,
        n2_out: 0.0,
        n2_hidden: [0.0; N2_HIDDEN],
    };
    for f in ext_start..region.start {
        frames.push(blank(f, first_bin, 0.0, FrameKind::Extrapolated));
    }
    for k in 0..span {
        let f = region.start + k;
        if let Some((b, a)) = best[k] {
            frames.push(blank(f, b as f64, a, FrameKind::Ridge));
        } else {
            let r = known.partition_point(|&x| x < k);
            let (l, rr) = (known[r - 1], known[r]);
            let (bl, br) = (best[l].unwrap().0 as f64, best[rr].unwrap().0 as f64);
            let t = (k - l) as f64 / (rr - l) as f64;
            frames.push(blank(f, bl + (br - bl) * t, 0.0, FrameKind::Interpolated));
        }
    }
    Contour {
        id,
        region_start: region.start,
        centroid: region.centroid,
        frames,
    }
}

/// Fills the pitch-network output and tap activations of every contour frame.
pub fn annotate_n2(contours: &mut [Contour], n2: &Model, stack: &ShiftedStack, t0s: &[Vec<TentativeF0>]) -> Result<()> {
    const CHUNK: usize = 4096;
    let flat: Vec<(usize, usize)> = contours
        .iter()
        .enumerate()
        .flat_map(|(c, con)| (0..con.frames.len()).map(move |k| (c, k)))
        .collect();
    for chunk in flat.chunks(CHUNK) {
        let mut rows = Vec::with_capacity(chunk.len() * N2_INPUT);
        for &(c, k) in chunk {
            let fr = &contours[c].frames[k];
            pitchogram::n2_features(stack, fr.frame, fr.cents, &t0s[fr.frame], &mut rows);
        }
        let (z, hidden) = pitchogram::run_n2(n2, rows, chunk.len())?;
        for (r, &(c, k)) in chunk.iter().enumerate() {
            let fr = &mut contours[c].frames[k];
            fr.n2_out = sigmoid(z[r]);
            for (h, v) in fr.n2_hidden.iter_mut().zip(hidden.row(r)) {
                *h = *v;
            }
        }
    }
    Ok(())
}

/// Regions, merging and ridges of a Pitchogram; pitch-network fields zero.
pub fn extract_contours(p: &PitchogramGrid) -> Vec<Contour> {
    merge_regions(extract_regions(p))
        .iter()
        .enumerate()
        .map(|(id, r)| extract_ridge(r, id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn grid(nf: usize, nb: usize, cells: &[(usize, usize, f64)]) -> PitchogramGrid {
        let mut data = Array2::zeros((nf, nb));
        for &(i, b, v) in cells {
            data[[i, b]] = v;
        }
        PitchogramGrid { data }
    }

    fn region(start: usize, len: usize, bin: usize) -> Region {
        Region::from_cells((start..start + len).map(|f| (f, bin, 1.0)).collect())
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let g = grid(3, 3, &[(0, 0, 1.0), (1, 1, 1.0)]);
        assert_eq!(extract_regions(&g).len(), 1);
        let g = grid(3, 3, &[(0, 0, 1.0), (2, 2, 1.0)]);
        assert_eq!(extract_regions(&g).len(), 2);
    }

    #[test]
    fn regions_match_flood_fill_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (nf, nb) = (12, 15);
            let data = Array2::from_shape_fn((nf, nb), |_| if rng.random_bool(0.25) { 1.0 } else { 0.0 });
            let g = PitchogramGrid { data: data.clone() };
            // oracle: union-find over 8-neighbour pairs
            let idx = |i: usize, b: usize| i * nb + b;
            let mut parent: Vec<usize> = (0..nf * nb).collect();
            fn find(p: &mut Vec<usize>, x: usize) -> usize {
                if p[x] != x {
                    let r = find(p, p[x]);
                    p[x] = r;
                }
                p[x]
            }
            for i in 0..nf {
                for b in 0..nb {
                    if data[[i, b]] <= 0.0 {
                        continue;
                    }
                    for (di, db) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                        let (ni, nbb) = (i as i64 + di, b as i64 + db);
                        if ni < nf as i64 && nbb >= 0 && nbb < nb as i64 && data[[ni as usize, nbb as usize]] > 0.0 {
                            let (x, y) = (find(&mut parent, idx(i, b)), find(&mut parent, idx(ni as usize, nbb as usize)));
                            parent[x] = y;
                        }
                    }
                }
            }
            let mut oracle: BTreeSet<BTreeSet<(usize, usize)>> = BTreeSet::new();
            let mut groups: std::collections::BTreeMap<usize, BTreeSet<(usize, usize)>> = Default::default();
            for i in 0..nf {
                for b in 0..nb {
                    if data[[i, b]] > 0.0 {
                        let r = find(&mut parent, idx(i, b));
                        groups.entry(r).or_default().insert((i, b));
                    }
                }
            }
            oracle.extend(groups.into_values());
            let got: BTreeSet<BTreeSet<(usize, usize)>> = extract_regions(&g)
                .into_iter()
                .map(|r| r.cells.iter().map(|c| (c.0, c.1)).collect())
                .collect();
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn same_pitch_after_short_gap_merges() {
        let merged = merge_regions(vec![region(0, 10, 3000), region(27, 5, 3000)]);
        assert_eq!(merged.len(), 1);
        assert_eq!((merged[0].start, merged[0].end), (0, 31));
    }

    #[test]
    fn distant_pitch_does_not_merge() {
        let merged = merge_regions(vec![region(0, 10, 3000), region(12, 5, 3060)]);
        assert_eq!(merged.len(), 2);
    }

    #[test]
    fn gap_boundaries() {
        assert_eq!(merge_regions(vec![region(0, 10, 3000), region(9 + 22, 5, 3000)]).len(), 1);
        assert_eq!(merge_regions(vec![region(0, 10, 3000), region(9 + 23, 5, 3000)]).len(), 2);
    }

    #[test]
    fn chained_merge_reaches_fixpoint() {
        // C is 60 cents from A but within 50 of the merged A+B centroid.
        let a = Region::from_cells((0..10).map(|f| (f, 3000, 1.0)).collect());
        let b = Region::from_cells((15..25).map(|f| (f, 3040, 3.0)).collect());
        let c = Region::from_cells((30..35).map(|f| (f, 3060, 1.0)).collect());
        assert!((c.centroid - a.centroid).abs() > 50.0);
        let merged = merge_regions(vec![c, b, a]);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].cells.len(), 25);
    }

    #[test]
    fn single_frame_region_gives_31_frames() {
        let c = extract_ridge(&region(40, 1, 500), 0);
        assert_eq!(c.len(), 31);
        assert_eq!(c.frames.iter().filter(|f| f.kind == FrameKind::Extrapolated).count(), 30);
        assert!(c.frames.iter().all(|f| f.bin == 500.0));
    }

    #[test]
    fn extension_clamps_at_track_start() {
        let c = extract_ridge(&region(10, 3, 500), 0);
        assert_eq!(c.start(), 0);
        assert_eq!(c.len(), 13);
    }

    #[test]
    fn gaps_are_linearly_interpolated() {
        let r = Region::from_cells(vec![(50, 100, 1.0), (53, 106, 1.0)]);
        let c = extract_ridge(&r, 0);
        let bins: Vec<f64> = c.frames.iter().filter(|f| f.frame >= 50).map(|f| f.bin).collect();
        assert_eq!(bins, vec![100.0, 102.0, 104.0, 106.0]);
    }

    #[test]
    fn ridge_is_per_frame_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cells: Vec<(usize, usize, f64)> = (0..40)
            .flat_map(|f| (0..6).map(move |b| (f, 200 + b)))
            .map(|(f, b)| (f, b, rng.random_range(0.1..1.0)))
            .collect();
        let r = Region::from_cells(cells.clone());
        let c = extract_ridge(&r, 0);
        for f in 0..40 {
            let expect = cells
                .iter()
                .filter(|x| x.0 == f)
                .max_by(|a, b| a.2.total_cmp(&b.2))
                .unwrap()
                .1;
            assert_eq!(c.at(f as i64).bin, expect as f64);
        }
        // strictly monotone rescaling keeps the ridge
        let r2 = Region::from_cells(cells.iter().map(|&(f, b, a)| (f, b, a.powi(3) * 7.0)).collect());
        let c2 = extract_ridge(&r2, 0);
        assert!(c.frames.iter().zip(&c2.frames).all(|(x, y)| x.bin == y.bin));
    }
}
