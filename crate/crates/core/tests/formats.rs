use mmrs::dataio::{load_cube, load_labels, save_cube, save_labels, Cube, LabelMap, SynthParams};
use mmrs::eval::render_map;
use mmrs::models::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};
use mmrs::training::{Dataset, Prepared};
use mmrs::RunConfig;
use proptest::prelude::*;

const PALETTE: [[u8; 3]; 3] = [[255, 0, 0], [0, 255, 0], [0, 0, 255]];

/// Minimal P6 reader: (width, height, pixels).
fn parse_p6(bytes: &[u8]) -> (usize, usize, Vec<[u8; 3]>) {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap().to_string());
    }
    pos += 1;
    assert_eq!(fields[0], "P6");
    assert_eq!(fields[3], "255");
    let (w, h): (usize, usize) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    let body = &bytes[pos..];
    assert_eq!(body.len(), 3 * w * h);
    (w, h, body.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

#[test]
fn maps_match_hand_written_fixtures() {
    let cases: [(&str, usize, usize, Vec<Option<usize>>); 3] = [
        ("map_2x2.ppm", 2, 2, vec![Some(0), None, Some(2), Some(1)]),
        ("map_3x1.ppm", 1, 3, vec![Some(1), Some(1), None]),
        ("map_1x2.ppm", 2, 1, vec![None, Some(0)]),
    ];
    for (name, h, w, grid) in cases {
        assert_eq!(render_map(&grid, h, w, &PALETTE).unwrap(), fixture(name), "{name}");
    }
}

#[test]
fn rendered_map_parses_as_p6() {
    let grid: Vec<Option<usize>> = (0..35).map(|i| (i % 4 != 3).then_some(i % 3)).collect();
    let (w, h, px) = parse_p6(&render_map(&grid, 5, 7, &PALETTE).unwrap());
    assert_eq!((w, h), (7, 5));
    for (cell, p) in grid.iter().zip(px) {
        assert_eq!(p, cell.map_or([0, 0, 0], |k| PALETTE[k]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cube_round_trip_is_bitwise(h in 1usize..6, w in 1usize..6, c in 1usize..5, values in prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO, 150)) {
        let values = values[..h * w * c].to_vec();
        let cube = Cube::new(h, w, c, values.clone()).unwrap();
        let back = Cube::from_bytes(&cube.to_bytes()).unwrap();
        let got: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, want);
        prop_assert_eq!(back.to_bytes(), cube.to_bytes());
    }

    #[test]
    fn label_round_trip(h in 1usize..8, w in 1usize..8, raw in prop::collection::vec(-1i32..6, 64)) {
        let labels = LabelMap::new(h, w, raw[..h * w].to_vec()).unwrap();
        prop_assert_eq!(LabelMap::from_bytes(&labels.to_bytes()).unwrap(), labels);
    }
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cube = Cube::new(2, 3, 2, vec![0.0, -0.0, 1.5, f32::MIN_POSITIVE, 3.0e38, -7.25, 1e-42, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    save_cube(&cube, dir.path().join("c.mmrs")).unwrap();
    let back = load_cube(dir.path().join("c.mmrs")).unwrap();
    assert_eq!(back.to_bytes(), cube.to_bytes());
    let labels = LabelMap::new(2, 2, vec![-1, 0, 3, 1]).unwrap();
    save_labels(&labels, dir.path().join("l.mmlb")).unwrap();
    assert_eq!(load_labels(dir.path().join("l.mmlb")).unwrap(), labels);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ds = Dataset::synthetic(&SynthParams {
        height: 16,
        width: 16,
        ..SynthParams::default()
    })
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        patch_size: 3,
        dim: 8,
        heads: 2,
        depth: 1,
        decoder_dim: 4,
        decoder_heads: 1,
        decoder_depth: 1,
        text_dim: 8,
        text_heads: 2,
        text_depth: 1,
        embed_dim: 4,
        ..ModelConfig::default()
    };
    cfg.split.pool = 40;
    let data = Prepared::new(&ds, &cfg, None).unwrap();
    let model = Model::<f32>::new(&cfg.model, data.channels(), data.vocab.len(), data.vocab.eos(), data.classes(), 9).unwrap();
    let ck = Checkpoint::from_model(&model, "pretrain", &data.vocab, &data.stats, cfg.diffusion, serde_json::to_value(&cfg).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    save_checkpoint(&ck, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let rebuilt: Model<f32> = back.to_model().unwrap();
    for ((_, _, a), (_, _, b)) in rebuilt.params.iter().zip(model.params.iter()) {
        let (a, b): (Vec<u32>, Vec<u32>) = (
            a.data().iter().map(|v| v.to_bits()).collect(),
            b.data().iter().map(|v| v.to_bits()).collect(),
        );
        assert_eq!(a, b);
    }
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ck");
    std::fs::write(&path, b"MMCK\x01\0\0\0\xff\xff\0\0{").unwrap();
    let e = load_checkpoint(&path).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("offset"), "{e}");
}
