use crate::error::{Error, Result};

/// Half-open row and column ranges of one spatial region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl Region {
    pub fn area(&self) -> usize {
        (self.rows.1 - self.rows.0) * (self.cols.1 - self.cols.0)
    }
}

/// Splits `h × w` into an `s × s` grid; region `(i, j)` covers rows
/// `⌊ih/s⌋..⌊(i+1)h/s⌋` and the analogous columns. Ordered row-major in `(i, j)`.
pub fn region_partition(h: usize, w: usize, s: usize) -> Result<Vec<Region>> {
    if s == 0 || s > h.min(w) {
        return Err(Error::invalid(
            "region_partition",
            format!("scale {s} must be in 1..={} for a {h}x{w} map", h.min(w)),
        ));
    }
    let mut out = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            out.push(Region {
                rows: (i * h / s, (i + 1) * h / s),
                cols: (j * w / s, (j + 1) * w / s),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_by_four_halves() {
        let r = region_partition(4, 4, 2).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(|x| x.area() == 4));
        assert_eq!(r[3], Region { rows: (2, 4), cols: (2, 4) });
    }

    #[test]
    fn seven_splits_three_four() {
        let r = region_partition(7, 7, 2).unwrap();
        let sides: Vec<_> = r.iter().map(|x| (x.rows.1 - x.rows.0, x.cols.1 - x.cols.0)).collect();
        assert_eq!(sides, vec![(3, 3), (3, 4), (4, 3), (4, 4)]);
    }

    #[test]
    fn single_region_and_errors() {
        assert_eq!(region_partition(5, 3, 1).unwrap(), vec![Region { rows: (0, 5), cols: (0, 3) }]);
        assert!(region_partition(4, 3, 4).is_err());
        assert!(region_partition(4, 4, 0).is_err());
    }

    #[test]
    fn tiles_exhaustively() {
        for h in 1..=32 {
            for w in 1..=32 {
                for s in 1..=h.min(w) {
                    let mut hits = vec![0u8; h * w];
                    for r in region_partition(h, w, s).unwrap() {
                        assert!(r.area() > 0);
                        for y in r.rows.0..r.rows.1 {
                            for x in r.cols.0..r.cols.1 {
                                hits[y * w + x] += 1;
                            }
                        }
                    }
                    assert!(hits.iter().all(|&c| c == 1), "h={h} w={w} s={s}");
                }
            }
        }
    }
}
