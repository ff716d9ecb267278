use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Binary PPM (`P6`) bytes of a `height x width` class grid. `None` cells
/// (unlabeled) are black.
pub fn render_map(grid: &[Option<usize>], height: usize, width: usize, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    if grid.len() != height * width {
        return Err(Error::invalid(format!(
            "map grid has {} cells, expected {height}x{width}",
            grid.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * grid.len());
    for cell in grid {
        match cell {
            Some(k) => {
                let c = palette
                    .get(*k)
                    .ok_or_else(|| Error::invalid(format!("class {k} has no palette colour ({} given)", palette.len())))?;
                out.extend_from_slice(c);
            }
            None => out.extend_from_slice(&[0, 0, 0]),
        }
    }
    Ok(out)
}

pub fn save_map(bytes: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
