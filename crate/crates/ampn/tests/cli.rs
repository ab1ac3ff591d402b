use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ampn_core::checkpoint::Checkpoint;
use ampn_core::config::ModelConfig;
use ampn_core::io::{load_image, save_image, save_mask};
use ampn_core::model::Model;
use ampn_core::tensor::Tensor;
use ampn_core::types::{FocusMask, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn ampn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ampn")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    ckpt: PathBuf,
    image: PathBuf,
}

impl Fixture {
    fn new(h: usize, w: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(&ModelConfig::default(), 5).unwrap();
        let ckpt = dir.path().join("model.ampn");
        Checkpoint::from_model(&model, 0, None).save(&ckpt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Tensor::from_fn([1, 3, h, w], |_, _, _, _| rng.gen_range(0..=255) as f32 / 255.0);
        let image = dir.path().join("in.png");
        save_image(&ImageTensor::new(img).unwrap(), &image).unwrap();
        Fixture { dir, ckpt, image }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn mask(&self, name: &str, h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> PathBuf {
        let path = self.path(name);
        save_mask(&FocusMask::from_fn(h, w, f).unwrap(), &path).unwrap();
        path
    }
}

#[test]
fn render_writes_image_of_input_size() {
    let fx = Fixture::new(64, 96);
    let out = fx.path("out.png");
    let dump = fx.path("mask.png");
    let o = ampn(&["render", "--in", p(&fx.image), "--ckpt", p(&fx.ckpt), "--out", p(&out), "--dump-mask", p(&dump)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let img = load_image(&out).unwrap();
    assert_eq!((img.height(), img.width()), (64, 96));
    let m = load_image(&dump).unwrap();
    assert_eq!((m.height(), m.width()), (16, 24));
}

#[test]
fn non_divisible_input_is_resized_and_reported() {
    let fx = Fixture::new(70, 90);
    let out = fx.path("out.png");
    let o = ampn(&["render", "--in", p(&fx.image), "--ckpt", p(&fx.ckpt), "--out", p(&out)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("70x90"));
    let img = load_image(&out).unwrap();
    assert_eq!((img.height(), img.width()), (64, 96));
}

#[test]
fn white_mask_returns_the_input() {
    let fx = Fixture::new(64, 64);
    let ones = fx.mask("ones.png", 64, 64, |_, _| 1.0);
    let out = fx.path("out.png");
    let o = ampn(&["render", "--in", p(&fx.image), "--ckpt", p(&fx.ckpt), "--out", p(&out), "--mask", p(&ones)]);
    assert!(o.status.success());
    assert_eq!(load_image(&out).unwrap(), load_image(&fx.image).unwrap());
}

#[test]
fn background_level_changes_only_the_background() {
    let fx = Fixture::new(64, 64);
    let inside = |y: usize, x: usize| (16..48).contains(&y) && (16..48).contains(&x);
    let mask = fx.mask("m.png", 64, 64, |y, x| if inside(y, x) { 1.0 } else { 0.0 });
    let render = |level: &str, name: &str| {
        let out = fx.path(name);
        let o = ampn(&[
            "render", "--in", p(&fx.image), "--ckpt", p(&fx.ckpt), "--out", p(&out), "--mask", p(&mask),
            "--background-level", level,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        load_image(&out).unwrap()
    };
    let (a, b) = (render("0.0", "a.png"), render("0.6", "b.png"));
    assert_ne!(a, b);
    let input = load_image(&fx.image).unwrap();
    for c in 0..3 {
        for y in 0..64 {
            for x in 0..64 {
                if inside(y, x) {
                    assert_eq!(a.tensor().at(0, c, y, x), input.tensor().at(0, c, y, x));
                    assert_eq!(b.tensor().at(0, c, y, x), input.tensor().at(0, c, y, x));
                }
            }
        }
    }
}

#[test]
fn exit_codes() {
    let fx = Fixture::new(64, 64);
    let out = fx.path("out.png");
    assert_eq!(ampn(&["render", "--in", p(&fx.image)]).status.code(), Some(1));
    assert_eq!(ampn(&["render", "--bogus"]).status.code(), Some(1));
    let level = ["--background-level", "0.9"];
    let o = ampn(&[&["render", "--in", p(&fx.image), "--ckpt", p(&fx.ckpt), "--out", p(&out)][..], &level].concat());
    assert_eq!(o.status.code(), Some(1));

    let missing = fx.path("nope.png");
    let o = ampn(&["render", "--in", p(&missing), "--ckpt", p(&fx.ckpt), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = ampn(&["render", "--in", p(&fx.image), "--ckpt", p(&fx.path("nope.ampn")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let bad_mask = fx.mask("small.png", 10, 10, |_, _| 1.0);
    let o = ampn(&["render", "--in", p(&fx.image), "--ckpt", p(&fx.ckpt), "--out", p(&out), "--mask", p(&bad_mask)]);
    assert_eq!(o.status.code(), Some(3));

    let cfg = fx.path("other.cfg");
    std::fs::write(&cfg, "base_width=16\n").unwrap();
    let o = ampn(&["render", "--in", p(&fx.image), "--ckpt", p(&fx.ckpt), "--out", p(&out), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");
    let o = ampn(&["synth", "--out", p(&data), "--count", "6", "--height", "64", "--width", "64", "--train-frac", "0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("train/input/00000.png").exists());
    assert!(data.join("eval/gt_mask/00005.png").exists());

    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "batch_size=2\nimage_height=64\nimage_width=64\n").unwrap();
    let o = ampn(&["train", "--in", p(&data), "--out", p(&runs), "--config", p(&cfg), "--steps", "2", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let last = runs.join("last.ampn");
    assert_eq!(Checkpoint::load(&last).unwrap().training_step, 2);
    assert!(runs.join("history.csv").exists());

    let o = ampn(&["train", "--in", p(&data), "--out", p(&runs), "--ckpt", p(&last), "--steps", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(Checkpoint::load(&last).unwrap().training_step, 3);

    let report = dir.path().join("report.tsv");
    let o = ampn(&["eval", "--in", p(&data), "--ckpt", p(&last), "--out", p(&report), "--quantized"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert!(lines[0].starts_with("# quantized=true"));
    assert_eq!(lines[1], "image\tPSNR\tSSIM\tLPIPS");
    assert_eq!(lines.len(), 2 + 3 + 1);
}
