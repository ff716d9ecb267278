//! Brings your own paired cubes: builds them in memory, writes the binary
//! files and catalog the CLI expects, and reads them back.
//!
//! `cargo run --release --example custom_data [out_dir]`

mod common;

use mmrs::dataio::{ClassCatalog, Cube, LabelMap};
use mmrs::training::{Dataset, CATALOG_FILE, CUBE_A_FILE, CUBE_B_FILE, LABELS_FILE};

fn main() -> mmrs::Result<()> {
    let (h, w) = (12, 16);
    let labels: Vec<i32> = (0..h * w).map(|i| if i % 7 == 0 { -1 } else { ((i % w) * 3 / w) as i32 }).collect();
    let labels = LabelMap::new(h, w, labels)?;
    let mut a = Cube::zeros(h, w, 6);
    let mut b = Cube::zeros(h, w, 1);
    for row in 0..h {
        for col in 0..w {
            let k = labels.get(row, col).unwrap_or(0) as f32;
            for (j, v) in a.pixel_mut(row, col).iter_mut().enumerate() {
                *v = k + 0.1 * j as f32;
            }
            b.pixel_mut(row, col)[0] = 10.0 * k;
        }
    }
    let ds = Dataset {
        cubes: [a, b],
        labels,
        catalog: ClassCatalog::synthetic(3),
    };
    ds.validate()?;

    let dir = common::out_dir("mmrs-custom");
    ds.save(&dir)?;
    let back = Dataset::load(&dir)?;
    assert_eq!(back, ds);
    for f in [CUBE_A_FILE, CUBE_B_FILE, LABELS_FILE, CATALOG_FILE] {
        let len = std::fs::metadata(dir.join(f)).map_or(0, |m| m.len());
        println!("{len:>8} bytes  {f}");
    }
    Ok(())
}
