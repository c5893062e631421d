//! Wafer grid, touchdown geometry and measurement datasets.
//!
//! Dies live on an integer grid. A [`TouchdownLayout`] lists the offset of
//! every probe site relative to the touchdown anchor, together with the
//! lattice stride used to step the probe card across the wafer. A layout is
//! only accepted when its offsets form a complete residue system modulo the
//! stride, which makes the row-major tiling an exact partition of the grid:
//! every die is probed by exactly one `(anchor, site)` pair.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer die position on the wafer grid.
///
/// Ordering is row-major: by `y` first, then `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DieCoord {
    pub x: i32,
    pub y: i32,
}

impl DieCoord {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    /// Squared Euclidean distance in grid units.
    #[inline]
    pub fn dist2(self, other: DieCoord) -> f64 {
        let dx = f64::from(self.x) - f64::from(other.x);
        let dy = f64::from(self.y) - f64::from(other.y);
        dx * dx + dy * dy
    }
}

impl Ord for DieCoord {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl PartialOrd for DieCoord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Index of a probe site within one touchdown, in `[0, S)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(transparent))]
pub struct SiteId(pub usize);

/// Set of die positions that physically exist on the wafer.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(untagged))]
pub enum WaferGeometry {
    /// Dies with `(x-cx)^2 + (y-cy)^2 <= r^2`.
    Disc { cx: i32, cy: i32, r: i32 },
    /// Full rectangle `[x0, x0+width) x [y0, y0+height)`.
    Rect { x0: i32, y0: i32, width: i32, height: i32 },
}

impl WaferGeometry {
    pub fn disc(cx: i32, cy: i32, r: i32) -> Result<Self> {
        let g = WaferGeometry::Disc { cx, cy, r };
        g.validate()?;
        Ok(g)
    }

    pub fn rect(x0: i32, y0: i32, width: i32, height: i32) -> Result<Self> {
        let g = WaferGeometry::Rect { x0, y0, width, height };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WaferGeometry::Disc { r, .. } if r <= 0 => Err(Error::InvalidGeometry("radius must be > 0")),
            WaferGeometry::Rect { width, height, .. } if width <= 0 || height <= 0 => {
                Err(Error::InvalidGeometry("rectangle must have positive extent"))
            }
            _ => Ok(()),
        }
    }

    pub fn contains(&self, c: DieCoord) -> bool {
        match *self {
            WaferGeometry::Disc { cx, cy, r } => {
                let dx = i64::from(c.x) - i64::from(cx);
                let dy = i64::from(c.y) - i64::from(cy);
                dx * dx + dy * dy <= i64::from(r) * i64::from(r)
            }
            WaferGeometry::Rect { x0, y0, width, height } => {
                c.x >= x0 && c.x < x0 + width && c.y >= y0 && c.y < y0 + height
            }
        }
    }

    /// Inclusive bounding box `(xmin, ymin, xmax, ymax)`.
    pub fn bounds(&self) -> (i32, i32, i32, i32) {
        match *self {
            WaferGeometry::Disc { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            WaferGeometry::Rect { x0, y0, width, height } => (x0, y0, x0 + width - 1, y0 + height - 1),
        }
    }

    /// Geometric center in grid units.
    pub fn center(&self) -> (f64, f64) {
        match *self {
            WaferGeometry::Disc { cx, cy, .. } => (f64::from(cx), f64::from(cy)),
            WaferGeometry::Rect { x0, y0, width, height } => (
                f64::from(x0) + f64::from(width - 1) / 2.0,
                f64::from(y0) + f64::from(height - 1) / 2.0,
            ),
        }
    }

    /// All dies in row-major order.
    pub fn dies(&self) -> Vec<DieCoord> {
        let (x0, y0, x1, y1) = self.bounds();
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                let c = DieCoord::new(x, y);
                if self.contains(c) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn die_count(&self) -> usize {
        self.dies().len()
    }
}

/// Per-site offset pattern of one probe-card touchdown.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(
    feature = "serde",
    derive(Serialize, Deserialize),
    serde(try_from = "LayoutRepr", into = "LayoutRepr")
)]
pub struct TouchdownLayout {
    offsets: Vec<(i32, i32)>,
    stride: (i32, i32),
}

#[cfg(feature = "serde")]
#[derive(Serialize, Deserialize)]
struct LayoutRepr {
    offsets: Vec<[i32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<[i32; 2]>,
}

#[cfg(feature = "serde")]
impl TryFrom<LayoutRepr> for TouchdownLayout {
    type Error = Error;

    fn try_from(r: LayoutRepr) -> Result<Self> {
        let offsets = r.offsets.into_iter().map(|[dx, dy]| (dx, dy)).collect();
        match r.stride {
            Some([px, py]) => TouchdownLayout::with_stride(offsets, (px, py)),
            None => TouchdownLayout::new(offsets),
        }
    }
}

#[cfg(feature = "serde")]
impl From<TouchdownLayout> for LayoutRepr {
    fn from(l: TouchdownLayout) -> Self {
        let bbox = bounding_box(&l.offsets);
        LayoutRepr {
            offsets: l.offsets.iter().map(|&(dx, dy)| [dx, dy]).collect(),
            stride: (l.stride != bbox).then_some([l.stride.0, l.stride.1]),
        }
    }
}

fn bounding_box(offsets: &[(i32, i32)]) -> (i32, i32) {
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (i32::MAX, i32::MIN, i32::MAX, i32::MIN);
    for &(dx, dy) in offsets {
        xmin = xmin.min(dx);
        xmax = xmax.max(dx);
        ymin = ymin.min(dy);
        ymax = ymax.max(dy);
    }
    (xmax - xmin + 1, ymax - ymin + 1)
}

impl TouchdownLayout {
    /// Layout stepped by its bounding-box stride. The offsets must fill the
    /// bounding box exactly.
    pub fn new(offsets: Vec<(i32, i32)>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::DegenerateLayout("layout has no sites"));
        }
        let stride = bounding_box(&offsets);
        Self::with_stride(offsets, stride)
    }

    /// Layout stepped by an explicit lattice stride.
    pub fn with_stride(offsets: Vec<(i32, i32)>, stride: (i32, i32)) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::DegenerateLayout("layout has no sites"));
        }
        if stride.0 <= 0 || stride.1 <= 0 {
            return Err(Error::DegenerateLayout("stride must be positive"));
        }
        let distinct: BTreeSet<_> = offsets.iter().collect();
        if distinct.len() != offsets.len() {
            return Err(Error::DegenerateLayout("duplicate site offsets"));
        }
        let cells = i64::from(stride.0) * i64::from(stride.1);
        if cells != offsets.len() as i64 {
            return Err(Error::DegenerateLayout("site count must equal stride area"));
        }
        let residues: BTreeSet<_> = offsets
            .iter()
            .map(|&(dx, dy)| (dx.rem_euclid(stride.0), dy.rem_euclid(stride.1)))
            .collect();
        if residues.len() != offsets.len() {
            return Err(Error::DegenerateLayout("offsets do not tile the wafer under the stride"));
        }
        Ok(Self { offsets, stride })
    }

    /// One site; every die is its own touchdown.
    pub fn single_site() -> Self {
        Self { offsets: alloc::vec![(0, 0)], stride: (1, 1) }
    }

    /// Rectangular `w x h` block of adjacent sites, numbered row-major.
    pub fn block(w: i32, h: i32) -> Result<Self> {
        let mut offsets = Vec::new();
        for dy in 0..h {
            for dx in 0..w {
                offsets.push((dx, dy));
            }
        }
        Self::new(offsets)
    }

    /// Built-in 16-site staggered pattern: a 4 x 4 array of sites spaced five
    /// dies apart, odd columns shifted down by two rows. It is stepped on a
    /// 4 x 4 lattice, so each touchdown spans a 16 x 18 footprint while the
    /// tiling stays exact.
    pub fn staggered16() -> Self {
        let mut offsets = Vec::with_capacity(16);
        for j in 0..4 {
            for i in 0..4 {
                offsets.push((5 * i, 5 * j + 2 * (i % 2)));
            }
        }
        Self::with_stride(offsets, (4, 4)).expect("built-in layout tiles")
    }

    pub fn site_count(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    pub fn stride(&self) -> (i32, i32) {
        self.stride
    }

    /// Site probing `c` under the lattice tiling (ignores wafer bounds).
    pub fn lattice_site(&self, c: DieCoord) -> SiteId {
        let rx = c.x.rem_euclid(self.stride.0);
        let ry = c.y.rem_euclid(self.stride.1);
        let s = self
            .offsets
            .iter()
            .position(|&(dx, dy)| dx.rem_euclid(self.stride.0) == rx && dy.rem_euclid(self.stride.1) == ry)
            .expect("offsets form a complete residue system");
        SiteId(s)
    }

    /// Anchor of the touchdown that probes `c`.
    pub fn lattice_anchor(&self, c: DieCoord) -> DieCoord {
        let (dx, dy) = self.offsets[self.lattice_site(c).0];
        DieCoord::new(c.x - dx, c.y - dy)
    }

    /// Die probed by `site` when the card is placed at `anchor`.
    pub fn placement(&self, anchor: DieCoord, site: SiteId) -> DieCoord {
        let (dx, dy) = self.offsets[site.0];
        DieCoord::new(anchor.x + dx, anchor.y + dy)
    }
}

/// Every anchor whose touchdown lands at least one site on a wafer die, in
/// row-major order.
pub fn enumerate_touchdowns(geometry: &WaferGeometry, layout: &TouchdownLayout) -> Result<Vec<DieCoord>> {
    geometry.validate()?;
    if layout.site_count() == 0 {
        return Err(Error::DegenerateLayout("layout has no sites"));
    }
    let anchors: BTreeSet<DieCoord> = geometry.dies().into_iter().map(|c| layout.lattice_anchor(c)).collect();
    Ok(anchors.into_iter().collect())
}

/// A layout tiled over a concrete wafer.
#[derive(Clone, Debug)]
pub struct Tiling {
    geometry: WaferGeometry,
    layout: TouchdownLayout,
    anchors: Vec<DieCoord>,
}

impl Tiling {
    pub fn new(geometry: WaferGeometry, layout: TouchdownLayout) -> Result<Self> {
        let anchors = enumerate_touchdowns(&geometry, &layout)?;
        Ok(Self { geometry, layout, anchors })
    }

    pub fn geometry(&self) -> &WaferGeometry {
        &self.geometry
    }

    pub fn layout(&self) -> &TouchdownLayout {
        &self.layout
    }

    /// Anchors in row-major order.
    pub fn anchors(&self) -> &[DieCoord] {
        &self.anchors
    }

    /// Site whose touchdown covers `c`.
    pub fn site_of(&self, c: DieCoord) -> Result<SiteId> {
        if !self.geometry.contains(c) {
            return Err(Error::OutsideTiling { x: c.x, y: c.y });
        }
        Ok(self.layout.lattice_site(c))
    }

    pub fn anchor_of(&self, c: DieCoord) -> Result<DieCoord> {
        if !self.geometry.contains(c) {
            return Err(Error::OutsideTiling { x: c.x, y: c.y });
        }
        Ok(self.layout.lattice_anchor(c))
    }

    /// On-wafer dies probed by the touchdown at `anchor`, in site order.
    pub fn dies_of(&self, anchor: DieCoord) -> Vec<(SiteId, DieCoord)> {
        (0..self.layout.site_count())
            .map(|s| (SiteId(s), self.layout.placement(anchor, SiteId(s))))
            .filter(|(_, c)| self.geometry.contains(*c))
            .collect()
    }
}

/// Free-function form of [`Tiling::site_of`].
pub fn site_of(coord: DieCoord, tiling: &Tiling) -> Result<SiteId> {
    tiling.site_of(coord)
}

/// One measured die.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Measurement {
    pub coord: DieCoord,
    pub site: SiteId,
    pub value: f64,
    pub lot: u32,
    pub wafer: u32,
}

/// Measurements of one wafer together with the geometry they were taken on.
///
/// Faulty or unmeasured dies are simply absent.
#[derive(Clone, Debug)]
pub struct MeasurementSet {
    records: Vec<Measurement>,
    index: BTreeMap<DieCoord, usize>,
    layout: TouchdownLayout,
    geometry: WaferGeometry,
}

impl MeasurementSet {
    pub fn new(records: Vec<Measurement>, layout: TouchdownLayout, geometry: WaferGeometry) -> Result<Self> {
        geometry.validate()?;
        let mut set = Self { records: Vec::with_capacity(records.len()), index: BTreeMap::new(), layout, geometry };
        for r in records {
            set.push(r)?;
        }
        Ok(set)
    }

    pub fn empty(layout: TouchdownLayout, geometry: WaferGeometry) -> Self {
        Self { records: Vec::new(), index: BTreeMap::new(), layout, geometry }
    }

    /// Appends a record after checking it against the set's invariants.
    pub fn push(&mut self, r: Measurement) -> Result<()> {
        if !r.value.is_finite() {
            return Err(Error::InvalidMeasurements(format!(
                "non-finite value at ({}, {})",
                r.coord.x, r.coord.y
            )));
        }
        if !self.geometry.contains(r.coord) {
            return Err(Error::OutsideTiling { x: r.coord.x, y: r.coord.y });
        }
        let expected = self.layout.lattice_site(r.coord);
        if expected != r.site {
            return Err(Error::InvalidMeasurements(format!(
                "die ({}, {}) recorded as site {} but the tiling assigns site {}",
                r.coord.x, r.coord.y, r.site.0, expected.0
            )));
        }
        if self.index.contains_key(&r.coord) {
            return Err(Error::InvalidMeasurements(format!("duplicate die ({}, {})", r.coord.x, r.coord.y)));
        }
        self.index.insert(r.coord, self.records.len());
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[Measurement] {
        &self.records
    }

    pub fn layout(&self) -> &TouchdownLayout {
        &self.layout
    }

    pub fn geometry(&self) -> &WaferGeometry {
        &self.geometry
    }

    pub fn tiling(&self) -> Result<Tiling> {
        Tiling::new(self.geometry.clone(), self.layout.clone())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn coords(&self) -> Vec<DieCoord> {
        self.records.iter().map(|r| r.coord).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }

    pub fn get(&self, c: DieCoord) -> Option<&Measurement> {
        self.index.get(&c).map(|&i| &self.records[i])
    }

    pub fn contains(&self, c: DieCoord) -> bool {
        self.index.contains_key(&c)
    }

    /// Number of wafer dies that have no record.
    pub fn missing_count(&self) -> usize {
        self.geometry.dies().iter().filter(|c| !self.contains(**c)).count()
    }

    /// True when every die of the geometry is measured.
    pub fn is_complete(&self) -> bool {
        self.missing_count() == 0
    }

    /// `max - min` of the recorded values, or `None` when empty.
    pub fn value_range(&self) -> Option<f64> {
        let mut it = self.records.iter().map(|r| r.value);
        let first = it.next()?;
        let (lo, hi) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(hi - lo)
    }

    /// New set holding the records at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let recs = indices.iter().map(|&i| self.records[i]).collect();
        Self::new(recs, self.layout.clone(), self.geometry.clone())
    }

    /// New set with the records whose coordinate passes `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&Measurement) -> bool) -> Self {
        let recs: Vec<_> = self.records.iter().copied().filter(|r| keep(r)).collect();
        Self::new(recs, self.layout.clone(), self.geometry.clone()).expect("subset of a valid set is valid")
    }
}

/// Seeded nested sample of `0..n`: the first `round(rate * n)` entries (at
/// least one) of a seeded permutation, and the rest. Both lists are sorted.
/// For a fixed seed the sample at a lower rate is contained in the sample at
/// any higher rate.
pub fn nested_sample(n: usize, rate: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyInput("population"));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidConfig(format!("sampling rate {rate} is outside (0, 1]")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let count = ((rate * n as f64 + 0.5) as usize).clamp(1, n);
    let mut train = perm[..count].to_vec();
    let mut rest = perm[count..].to_vec();
    train.sort_unstable();
    rest.sort_unstable();
    Ok((train, rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn brute_force_cover(geometry: &WaferGeometry, layout: &TouchdownLayout, anchors: &[DieCoord]) -> BTreeMap<DieCoord, usize> {
        let mut hits = BTreeMap::new();
        for &a in anchors {
            for s in 0..layout.site_count() {
                let c = layout.placement(a, SiteId(s));
                if geometry.contains(c) {
                    *hits.entry(c).or_insert(0) += 1;
                }
            }
        }
        hits
    }

    #[test]
    fn identity_layout_anchors_are_dies() {
        let g = WaferGeometry::disc(0, 0, 1).unwrap();
        let anchors = enumerate_touchdowns(&g, &TouchdownLayout::single_site()).unwrap();
        assert_eq!(anchors, g.dies());
        assert_eq!(anchors.len(), 5);
    }

    #[test]
    fn square_grid_block_layout_covers_each_die_once() {
        let g = WaferGeometry::rect(0, 0, 8, 8).unwrap();
        let l = TouchdownLayout::block(2, 2).unwrap();
        let anchors = enumerate_touchdowns(&g, &l).unwrap();
        assert_eq!(anchors.len(), 16);
        let hits = brute_force_cover(&g, &l, &anchors);
        assert_eq!(hits.len(), 64);
        assert!(hits.values().all(|&n| n == 1));
    }

    #[test]
    fn block_site_of_matches_inverted_enumeration() {
        let g = WaferGeometry::rect(0, 0, 8, 8).unwrap();
        let l = TouchdownLayout::block(2, 2).unwrap();
        let tiling = Tiling::new(g.clone(), l.clone()).unwrap();
        // invert the anchor enumeration by brute force
        let mut inverse = BTreeMap::new();
        for &a in tiling.anchors() {
            for (s, c) in tiling.dies_of(a) {
                inverse.insert(c, s);
            }
        }
        assert_eq!(tiling.site_of(DieCoord::new(1, 0)).unwrap(), SiteId(1));
        assert_eq!(l.offsets()[1], (1, 0));
        for c in g.dies() {
            assert_eq!(tiling.site_of(c).unwrap(), inverse[&c]);
        }
    }

    #[test]
    fn single_site_is_always_site_zero() {
        let t = Tiling::new(WaferGeometry::disc(3, 3, 4).unwrap(), TouchdownLayout::single_site()).unwrap();
        for c in t.geometry().dies() {
            assert_eq!(t.site_of(c).unwrap(), SiteId(0));
        }
    }

    #[test]
    fn site_of_outside_disc_is_error() {
        let t = Tiling::new(WaferGeometry::disc(0, 0, 3).unwrap(), TouchdownLayout::single_site()).unwrap();
        assert_eq!(t.site_of(DieCoord::new(3, 3)), Err(Error::OutsideTiling { x: 3, y: 3 }));
    }

    #[test]
    fn empty_layout_is_degenerate() {
        assert!(matches!(TouchdownLayout::new(vec![]), Err(Error::DegenerateLayout(_))));
    }

    #[test]
    fn non_tiling_layouts_are_rejected() {
        assert!(TouchdownLayout::new(vec![(0, 0), (0, 0)]).is_err());
        // checkerboard inside a 2x2 box leaves holes
        assert!(TouchdownLayout::new(vec![(0, 0), (1, 1)]).is_err());
        assert!(TouchdownLayout::with_stride(vec![(0, 0), (2, 0)], (2, 1)).is_err());
    }

    #[test]
    fn staggered_layout_tiles_disc_exactly() {
        let g = WaferGeometry::disc(0, 0, 20).unwrap();
        let l = TouchdownLayout::staggered16();
        let anchors = enumerate_touchdowns(&g, &l).unwrap();
        let hits = brute_force_cover(&g, &l, &anchors);
        assert_eq!(hits.len(), g.die_count());
        assert!(hits.values().all(|&n| n == 1));
        assert!(anchors.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn measurement_set_rejects_bad_records() {
        let l = TouchdownLayout::block(2, 1).unwrap();
        let g = WaferGeometry::rect(0, 0, 4, 1).unwrap();
        let m = |x, s, v| Measurement { coord: DieCoord::new(x, 0), site: SiteId(s), value: v, lot: 1, wafer: 1 };
        assert!(MeasurementSet::new(vec![m(0, 0, 1.0), m(1, 1, 2.0)], l.clone(), g.clone()).is_ok());
        assert!(MeasurementSet::new(vec![m(0, 1, 1.0)], l.clone(), g.clone()).is_err());
        assert!(MeasurementSet::new(vec![m(0, 0, 1.0), m(0, 0, 1.0)], l.clone(), g.clone()).is_err());
        assert!(MeasurementSet::new(vec![m(0, 0, f64::NAN)], l.clone(), g.clone()).is_err());
        assert!(MeasurementSet::new(vec![m(9, 1, 1.0)], l, g).is_err());
    }

    #[test]
    fn nested_sample_is_nested() {
        let (small, _) = nested_sample(50, 0.1, 7).unwrap();
        let (big, rest) = nested_sample(50, 0.5, 7).unwrap();
        assert_eq!(small.len(), 5);
        assert_eq!(big.len() + rest.len(), 50);
        assert!(small.iter().all(|i| big.contains(i)));
        assert_eq!(nested_sample(3, 0.01, 1).unwrap().0.len(), 1);
        assert!(nested_sample(3, 0.0, 1).is_err());
        assert!(nested_sample(3, 1.5, 1).is_err());
    }
}
