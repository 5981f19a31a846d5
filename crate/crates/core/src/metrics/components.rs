use std::collections::VecDeque;

/// Region labels of a binary mask under 8-connectivity: `0` is background,
/// regions are numbered from 1 in raster order of their first pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labeling {
    pub labels: Vec<u32>,
    pub count: usize,
    pub sizes: Vec<usize>,
}

pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Labeling {
    assert_eq!(mask.len(), h * w, "mask length must equal h * w");
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = id;
                        queue.push_back(q);
                    }
                }
            }
        }
        sizes.push(size);
    }
    Labeling {
        labels,
        count: sizes.len(),
        sizes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(rows: &[&str]) -> (Vec<bool>, usize, usize) {
        let h = rows.len();
        let w = rows[0].len();
        (
            rows.iter()
                .flat_map(|r| r.bytes().map(|b| b == b'#'))
                .collect(),
            h,
            w,
        )
    }

    #[test]
    fn empty_mask_has_no_regions() {
        let l = connected_components(&[false; 12], 3, 4);
        assert_eq!(l.count, 0);
        assert!(l.labels.iter().all(|&v| v == 0));
    }

    #[test]
    fn diagonal_neighbors_connect() {
        let (m, h, w) = parse(&["#.", ".#"]);
        assert_eq!(connected_components(&m, h, w).count, 1);
    }

    #[test]
    fn even_parity_checkerboard_is_one_region() {
        let (m, h, w) = parse(&["#.#.", ".#.#", "#.#.", ".#.#"]);
        let l = connected_components(&m, h, w);
        assert_eq!(l.count, 1);
        assert_eq!(l.sizes, [8]);
    }

    #[test]
    fn labels_follow_raster_order() {
        let (m, h, w) = parse(&["..##", "#...", "#..#"]);
        let l = connected_components(&m, h, w);
        assert_eq!(l.count, 3);
        assert_eq!(l.labels, [0, 0, 1, 1, 2, 0, 0, 0, 2, 0, 0, 3]);
        assert_eq!(l.sizes, [2, 2, 1]);
    }
}
