use super::cube::Cube;
use crate::error::{Error, Result};

/// Pixel coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// `size × size × channels` window, pixel-major with the channel fastest, so
/// pixel `i` of the window is row `i` of a `[size², channels]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl Patch {
    pub fn tokens(&self) -> usize {
        self.size * self.size
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }
}

/// Co-located patches from every modality around one center pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub center: Coord,
    pub label: Option<usize>,
    pub patches: Vec<Patch>,
}

/// Reflects `i` into `[0, n)` about the borders without repeating the edge
/// sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Extracts an `size × size` window of one cube centered on `center`.
pub fn extract_window(cube: &Cube, center: Coord, size: usize) -> Result<Patch> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::invalid(format!("patch size must be odd, got {size}")));
    }
    if center.row >= cube.height() || center.col >= cube.width() {
        return Err(Error::invalid(format!(
            "center {center:?} outside {}x{} image",
            cube.height(),
            cube.width()
        )));
    }
    let half = (size / 2) as isize;
    let c = cube.channels();
    let mut values = Vec::with_capacity(size * size * c);
    for dr in -half..=half {
        let r = reflect_index(center.row as isize + dr, cube.height());
        for dc in -half..=half {
            let col = reflect_index(center.col as isize + dc, cube.width());
            values.extend_from_slice(cube.pixel(r, col));
        }
    }
    Ok(Patch {
        size,
        channels: c,
        values,
    })
}

/// Extracts co-located windows from every modality.
pub fn extract_patch(cubes: &[&Cube], center: Coord, size: usize, label: Option<usize>) -> Result<PatchSample> {
    let patches = cubes
        .iter()
        .map(|cube| extract_window(cube, center, size))
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSample {
        center,
        label,
        patches,
    })
}
