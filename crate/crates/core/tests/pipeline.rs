use std::path::Path;

use anomaly_recon::diffusion::{
    even_steps, sdas_sample, to_image_space, Denoiser, DiffusionSchedule, SamplerConfig,
};
use anomaly_recon::image_io;
use anomaly_recon::model::DetectionModel;
use anomaly_recon::pipeline::{
    draw_strengths, generate_toy, Pipeline, PipelineConfig, ToySpec, KEY_TRAIN_INIT,
    MULTICLASS_GROUP, TOY_CATEGORY,
};
use anomaly_recon::Error;
use anomaly_tensor::{ParamSet, Rng, Tensor};

const TINY: &str = r#"
[data]
image_size = 16

[diffusion.train]
timesteps = 20
steps = 2
batch = 2
crop = 8

[synth]
count = 2
steps = 4

[blend]
use_foreground = false

[afs]
m = [2, 2, 2, 2]
samples = 4
batch = 2

[model]
disc_hidden = 8

[train]
steps = 2
batch = 2

[eval]
batch = 4
"#;

fn tiny_spec() -> ToySpec {
    ToySpec {
        size: 16,
        train: 4,
        test_good: 2,
        test_square: 1,
        test_scratch: 1,
        seed: 1,
    }
}

fn config(root: &Path, extra: &[&str]) -> PipelineConfig {
    let mut o = vec![
        format!("paths.dataset={}", root.join("data").display()),
        format!("paths.work_dir={}", root.join("work").display()),
    ];
    o.extend(extra.iter().map(|s| s.to_string()));
    PipelineConfig::from_layers(&[TINY], &o).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    generate_toy(&dir.path().join("data"), &tiny_spec()).unwrap();
    dir
}

#[test]
fn rerun_hits_every_cache() {
    let dir = setup();
    let p = Pipeline::new(config(dir.path(), &[])).unwrap();
    let first = p.run_all().unwrap();
    assert!(p.train_diffusion().unwrap()[0].cached);
    assert!(p.synth().unwrap()[0].cached);
    assert!(p.afs().unwrap()[0].0.cached);
    assert!(p.train().unwrap()[0].cached);
    let again = Pipeline::new(config(dir.path(), &[]))
        .unwrap()
        .run_all()
        .unwrap();
    assert_eq!(first.to_json().unwrap(), again.to_json().unwrap());
    assert_eq!(first.images, 4);
    let maps = dir.path().join("work").join(TOY_CATEGORY);
    let eval = std::fs::read_dir(&maps)
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with("eval-"))
        .expect("eval directory");
    let pgm = eval
        .path()
        .join("maps")
        .join(TOY_CATEGORY)
        .join("good")
        .join("000.pgm");
    assert!(pgm.is_file(), "{} missing", pgm.display());
}

#[test]
fn seed_changes_digests() {
    let dir = setup();
    let a = Pipeline::new(config(dir.path(), &["seed=1"])).unwrap();
    let b = Pipeline::new(config(dir.path(), &["seed=2"])).unwrap();
    assert_ne!(a.config_digest(), b.config_digest());
    let (da, db) = (a.train_diffusion().unwrap(), b.train_diffusion().unwrap());
    assert_ne!(da[0].digest, db[0].digest);
    let (sa, sb) = (a.synth().unwrap(), b.synth().unwrap());
    assert_ne!(sa[0].path, sb[0].path);

    // paths and worker count do not enter the digest
    let c = Pipeline::new(config(dir.path(), &["seed=1", "workers=3"])).unwrap();
    assert_eq!(a.config_digest(), c.config_digest());
}

#[test]
fn foreign_selection_cache_is_rejected() {
    let dir = setup();
    let p = Pipeline::new(config(dir.path(), &[])).unwrap();
    p.train_diffusion().unwrap();
    p.synth().unwrap();
    let (out, _) = p.afs().unwrap().remove(0);
    let text = std::fs::read_to_string(&out.path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["extractor_id"] = "some-other-extractor".into();
    std::fs::write(&out.path, serde_json::to_vec(&v).unwrap()).unwrap();
    assert!(matches!(p.train(), Err(Error::Provenance(_))));
    assert!(matches!(p.afs(), Err(Error::Provenance(_))));
}

#[test]
fn missing_upstream_artifacts_are_reported() {
    let dir = setup();
    let p = Pipeline::new(config(dir.path(), &[])).unwrap();
    assert!(matches!(p.synth(), Err(Error::MissingArtifact(_))));
    assert!(matches!(p.afs(), Err(Error::MissingArtifact(_))));
    assert!(matches!(p.train(), Err(Error::MissingArtifact(_))));
    assert!(matches!(p.eval(), Err(Error::MissingArtifact(_))));
    p.train_diffusion().unwrap();
    p.synth().unwrap();
    assert!(matches!(p.train(), Err(Error::MissingArtifact(_))));
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config(dir.path(), &[])).unwrap();
    match p.train_diffusion() {
        Err(e @ Error::MissingPath(_)) => assert!(e.to_string().contains("data")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn zero_steps_keep_the_initial_weights_and_reload_exactly() {
    let dir = setup();
    let cfg = config(dir.path(), &["train.steps=0", "seed=5"]);
    let p = Pipeline::new(cfg.clone()).unwrap();
    p.train_diffusion().unwrap();
    p.synth().unwrap();
    p.afs().unwrap();
    let out = p.train().unwrap().remove(0);
    let group = p.groups().unwrap().remove(0);
    let (model, cache, _) = p.load_model(&group).unwrap();
    let init_seed = Rng::new(5).split(KEY_TRAIN_INIT).next_u64();
    let fresh = DetectionModel::new(&cache.m(), &cfg.model, (16, 16), init_seed).unwrap();
    assert_eq!(model.params, fresh.params);
    assert_eq!(model.stats, fresh.stats);
    let bytes = std::fs::read(&out.path).unwrap();
    assert_eq!(model.to_checkpoint().unwrap().to_bytes(), bytes);
}

#[test]
fn trained_checkpoint_reloads_bit_exactly() {
    let dir = setup();
    let p = Pipeline::new(config(dir.path(), &[])).unwrap();
    p.train_diffusion().unwrap();
    p.synth().unwrap();
    p.afs().unwrap();
    let out = p.train().unwrap().remove(0);
    let group = p.groups().unwrap().remove(0);
    let (model, _, _) = p.load_model(&group).unwrap();
    assert_eq!(
        model.to_checkpoint().unwrap().to_bytes(),
        std::fs::read(&out.path).unwrap()
    );
    let (again, _, _) = p.load_model(&group).unwrap();
    assert_eq!(model.params, again.params);
}

#[test]
fn zero_donors_give_an_empty_manifest() {
    let dir = setup();
    let p = Pipeline::new(config(dir.path(), &["synth.count=0"])).unwrap();
    p.train_diffusion().unwrap();
    let out = p.synth().unwrap().remove(0);
    let manifest = std::fs::read(out.path.join("manifest.jsonl")).unwrap();
    assert!(manifest.is_empty());
}

#[test]
fn zero_strength_donors_equal_unperturbed_samples() {
    let dir = setup();
    let cfg = config(
        dir.path(),
        &["synth.s_min=0.0", "synth.s_max=0.0", "seed=4"],
    );
    let p = Pipeline::new(cfg.clone()).unwrap();
    let diff = p.train_diffusion().unwrap().remove(0);
    let out = p.synth().unwrap().remove(0);

    let params = ParamSet::load(&diff.path).unwrap();
    let arch = cfg.diffusion.arch();
    let model = Denoiser {
        arch: &arch,
        params: &params,
    };
    let t = &cfg.diffusion.train;
    let sched = DiffusionSchedule::build(t.timesteps, t.schedule).unwrap();
    let sampler = SamplerConfig {
        clip_denoised: cfg.synth.clip_denoised,
        ..SamplerConfig::ddpm(t.timesteps, cfg.synth.steps, 0.0)
    };
    assert_eq!(sampler.steps, even_steps(t.timesteps, cfg.synth.steps));
    let check = tempfile::tempdir().unwrap();
    for (i, (seed, s)) in draw_strengths(4, 2, 0.0, 0.0).into_iter().enumerate() {
        assert_eq!(s, 0.0);
        let x = sdas_sample(
            &model,
            &sched,
            &sampler,
            &[1, 3, 16, 16],
            &mut Rng::new(seed),
        )
        .unwrap();
        let img = to_image_space(&x).reshape(&[3, 16, 16]).unwrap();
        let path = check.path().join("ref.png");
        image_io::save_rgb(&path, &img).unwrap();
        let donor = out.path.join(format!("donor_{i:05}.png"));
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&donor).unwrap()
        );
    }
}

#[test]
fn strengths_are_uniform_on_the_range() {
    let draws = draw_strengths(0, 1000, 0.1, 0.2);
    let mean = draws.iter().map(|d| d.1).sum::<f64>() / 1000.0;
    assert!((0.147..=0.153).contains(&mean), "mean strength {mean}");
    assert!(draws.iter().all(|d| (0.1..=0.2).contains(&d.1)));
    assert_eq!(draws, draw_strengths(0, 1000, 0.1, 0.2));
}

#[test]
fn score_maps_survive_a_pgm_round_trip() {
    let mut rng = Rng::new(3);
    let map = Tensor::from_fn(&[7, 5], |_| rng.uniform() as f32);
    let back = image_io::decode_pgm16(&image_io::encode_pgm16(&map).unwrap()).unwrap();
    assert_eq!(back.shape(), map.shape());
    for (a, b) in map.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 1.0 / 65535.0, "{a} vs {b}");
    }
}

#[test]
fn multiclass_pools_categories() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    for (name, seed) in [("alpha", 1), ("beta", 2)] {
        let tmp = dir.path().join(format!("gen-{name}"));
        generate_toy(
            &tmp,
            &ToySpec {
                seed,
                ..tiny_spec()
            },
        )
        .unwrap();
        std::fs::create_dir_all(&data).unwrap();
        std::fs::rename(tmp.join(TOY_CATEGORY), data.join(name)).unwrap();
    }
    let p = Pipeline::new(config(dir.path(), &["multiclass=true"])).unwrap();
    let groups = p.groups().unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].name, MULTICLASS_GROUP);
    assert_eq!(groups[0].categories, ["alpha", "beta"]);
    let report = p.run_all().unwrap();
    assert_eq!(report.categories.len(), 2);
    assert_eq!(report.images, 8);

    let per_class = Pipeline::new(config(dir.path(), &[])).unwrap();
    assert_eq!(per_class.groups().unwrap().len(), 2);
}

#[test]
fn precomputed_features_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &[]);
    cfg.extractor = anomaly_recon::feature_bank::ExtractorConfig::FileIngest {
        dir: dir.path().into(),
        layers: 4,
        shapes: vec![],
    };
    assert!(matches!(Pipeline::new(cfg), Err(Error::Config(_))));
}
