use std::path::{Path, PathBuf};

use anomaly_tensor::{io::atomic_write, Adam, AdamConfig, ParamSet, Rng, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{digest_parts, PipelineConfig};
use super::dataset::{self, TestItem};
use crate::compositor::{list_pngs, load_donors, SynthStream};
use crate::diffusion::{
    even_steps, sdas_sample, to_image_space, to_model_space, train_diffusion, Denoiser,
    DiffusionSchedule, SamplerConfig,
};
use crate::error::{Error, IoContext, Result};
use crate::feature_bank::{
    afs_select_cached, select_batch, AfsAccumulator, AfsIndexCache, ExtractorConfig,
    FeatureExtractor,
};
use crate::image_io;
use crate::metrics::{evaluate, EvalReport, ScoredImage};
use crate::model::{DetectionModel, StepMetrics, TrainBatch};

const MARKER: &str = "stage.json";
const MODEL_FILE: &str = "model.params";

// Stream keys under the global seed.
pub const KEY_SYNTH: u64 = 1;
pub const KEY_AFS: u64 = 2;
pub const KEY_TRAIN_INIT: u64 = 3;
pub const KEY_TRAIN_DATA: u64 = 4;

/// Where a stage's output lives and whether it was already there.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageOutput {
    pub group: String,
    pub digest: String,
    pub path: PathBuf,
    pub cached: bool,
}

#[derive(Serialize, Deserialize)]
struct Marker {
    stage: String,
    digest: String,
    config_digest: String,
}

/// One line of the donor manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DonorRecord {
    pub index: usize,
    pub seed: u64,
    pub s: f64,
    pub path: String,
}

/// Categories trained together: one per category, or all of them pooled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub name: String,
    pub categories: Vec<String>,
}

pub const MULTICLASS_GROUP: &str = "multiclass";

/// Per-image `(seed, s)` for donor generation; `s` is uniform on
/// `[s_min, s_max]`.
pub fn draw_strengths(seed: u64, count: usize, s_min: f64, s_max: f64) -> Vec<(u64, f64)> {
    let root = Rng::new(seed).split(KEY_SYNTH);
    (0..count)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let s = rng.uniform_range(s_min, s_max);
            (rng.next_u64(), s)
        })
        .collect()
}

fn short(digest: &str) -> &str {
    &digest[..16]
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("config serializes")
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(atomic_write(path, &buf)?)
}

pub struct Pipeline {
    cfg: PipelineConfig,
    config_digest: String,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        if matches!(cfg.extractor, ExtractorConfig::FileIngest { .. }) {
            return Err(Error::Config(
                "the pipeline needs the builtin extractor: precomputed features cannot describe synthesized images"
                    .into(),
            ));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self {
            config_digest: cfg.digest(),
            cfg,
            pool,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    pub fn groups(&self) -> Result<Vec<Group>> {
        let cats = dataset::categories(&self.cfg.paths.dataset, &self.cfg.data.categories)?;
        Ok(if self.cfg.multiclass {
            vec![Group {
                name: MULTICLASS_GROUP.into(),
                categories: cats,
            }]
        } else {
            cats.into_iter()
                .map(|c| Group {
                    name: c.clone(),
                    categories: vec![c],
                })
                .collect()
        })
    }

    fn group_dir(&self, g: &Group) -> PathBuf {
        self.cfg.paths.work_dir.join(&g.name)
    }

    fn normals(&self, g: &Group) -> Result<(Vec<Tensor<f32>>, String)> {
        let root = &self.cfg.paths.dataset;
        let mut files = Vec::new();
        for c in &g.categories {
            files.extend(dataset::train_files(root, c)?);
        }
        let digest = dataset::digest_files(root, &files)?;
        let size = self.cfg.data.image_size;
        let images = files
            .iter()
            .map(|f| dataset::load_image(f, size))
            .collect::<Result<Vec<_>>>()?;
        Ok((images, digest))
    }

    fn is_done(dir: &Path, digest: &str) -> bool {
        std::fs::read(dir.join(MARKER))
            .ok()
            .and_then(|b| serde_json::from_slice::<Marker>(&b).ok())
            .is_some_and(|m| m.digest == digest)
    }

    fn finish(&self, dir: &Path, stage: &str, digest: &str) -> Result<()> {
        atomic_write(dir.join("config.toml"), self.cfg.to_toml()?.as_bytes())?;
        let marker = Marker {
            stage: stage.into(),
            digest: digest.into(),
            config_digest: self.config_digest.clone(),
        };
        Ok(atomic_write(
            dir.join(MARKER),
            &serde_json::to_vec_pretty(&marker)?,
        )?)
    }

    fn diffusion_digest(&self, normals_digest: &str) -> String {
        let c = &self.cfg;
        digest_parts(&[
            b"diffusion",
            normals_digest.as_bytes(),
            &json(&c.data.image_size),
            &json(&c.diffusion.train),
            &json(&c.diffusion.arch()),
            &c.diffusion_seed().to_le_bytes(),
        ])
    }

    fn diffusion_dir(&self, g: &Group, digest: &str) -> PathBuf {
        self.group_dir(g)
            .join(format!("diffusion-{}", short(digest)))
    }

    /// Trains the donor generator of every group.
    pub fn train_diffusion(&self) -> Result<Vec<StageOutput>> {
        self.groups()?
            .iter()
            .map(|g| self.train_diffusion_group(g))
            .collect()
    }

    fn train_diffusion_group(&self, g: &Group) -> Result<StageOutput> {
        let (normals, nd) = self.normals(g)?;
        let digest = self.diffusion_digest(&nd);
        let dir = self.diffusion_dir(g, &digest);
        let out = |cached| StageOutput {
            group: g.name.clone(),
            digest: digest.clone(),
            path: dir.join(MODEL_FILE),
            cached,
        };
        if Self::is_done(&dir, &digest) {
            return Ok(out(true));
        }
        std::fs::create_dir_all(&dir).at(&dir)?;
        let data: Vec<Tensor<f32>> = normals.iter().map(to_model_space).collect();
        let (params, losses) = train_diffusion(
            &data,
            &self.cfg.diffusion.arch(),
            &self.cfg.diffusion.train,
            self.cfg.diffusion_seed(),
        )?;
        params.save(dir.join(MODEL_FILE))?;
        write_lines(&dir.join("losses.jsonl"), &losses)?;
        self.finish(&dir, "diffusion", &digest)?;
        Ok(out(false))
    }

    fn synth_digest(&self, diffusion_digest: &str) -> String {
        let c = &self.cfg;
        digest_parts(&[
            b"synth",
            diffusion_digest.as_bytes(),
            &json(&c.synth),
            &c.seed.to_le_bytes(),
        ])
    }

    /// Donor directory and its digest: sampled donors, or the configured
    /// texture directory.
    fn donor_source(&self, g: &Group, normals_digest: &str) -> Result<(PathBuf, String)> {
        if let Some(dir) = &self.cfg.synth.donor_dir {
            let files = list_pngs(dir)?;
            if files.is_empty() {
                return Err(Error::Data(format!(
                    "donor directory {} is empty",
                    dir.display()
                )));
            }
            return Ok((dir.clone(), dataset::digest_files(dir, &files)?));
        }
        let dd = self.diffusion_digest(normals_digest);
        let digest = self.synth_digest(&dd);
        let dir = self.group_dir(g).join(format!("synth-{}", short(&digest)));
        if !Self::is_done(&dir, &digest) {
            return Err(Error::MissingArtifact(dir.join("manifest.jsonl")));
        }
        Ok((dir, digest))
    }

    /// Samples donor images with perturbed reverse diffusion. A no-op when
    /// donors come from a texture directory.
    pub fn synth(&self) -> Result<Vec<StageOutput>> {
        self.groups()?.iter().map(|g| self.synth_group(g)).collect()
    }

    fn synth_group(&self, g: &Group) -> Result<StageOutput> {
        let (_, nd) = self.normals(g)?;
        if self.cfg.synth.donor_dir.is_some() {
            let (path, digest) = self.donor_source(g, &nd)?;
            return Ok(StageOutput {
                group: g.name.clone(),
                digest,
                path,
                cached: true,
            });
        }
        let dd = self.diffusion_digest(&nd);
        let ddir = self.diffusion_dir(g, &dd);
        if !Self::is_done(&ddir, &dd) {
            return Err(Error::MissingArtifact(ddir.join(MODEL_FILE)));
        }
        let digest = self.synth_digest(&dd);
        let dir = self.group_dir(g).join(format!("synth-{}", short(&digest)));
        let out = |cached| StageOutput {
            group: g.name.clone(),
            digest: digest.clone(),
            path: dir.clone(),
            cached,
        };
        if Self::is_done(&dir, &digest) {
            return Ok(out(true));
        }
        std::fs::create_dir_all(&dir).at(&dir)?;
        let params = ParamSet::load(ddir.join(MODEL_FILE))?;
        let arch = self.cfg.diffusion.arch();
        let model = Denoiser {
            arch: &arch,
            params: &params,
        };
        let t = &self.cfg.diffusion.train;
        let sched = DiffusionSchedule::build(t.timesteps, t.schedule)?;
        let sc = &self.cfg.synth;
        let size = self.cfg.data.image_size;
        let draws = draw_strengths(self.cfg.seed, sc.count, sc.s_min, sc.s_max);
        let images: Vec<Tensor<f32>> = self.pool.install(|| {
            draws
                .par_iter()
                .map(|&(seed, s)| {
                    let cfg = SamplerConfig {
                        kind: sc.sampler,
                        s,
                        ddim_sigma_choice: sc.ddim_sigma,
                        steps: even_steps(t.timesteps, sc.steps),
                        clip_denoised: sc.clip_denoised,
                    };
                    let x = sdas_sample(
                        &model,
                        &sched,
                        &cfg,
                        &[1, 3, size, size],
                        &mut Rng::new(seed),
                    )?;
                    Ok(to_image_space(&x).reshape(&[3, size, size])?)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut records = Vec::with_capacity(images.len());
        for (i, (img, &(seed, s))) in images.iter().zip(&draws).enumerate() {
            let name = format!("donor_{i:05}.png");
            image_io::save_rgb(&dir.join(&name), img)?;
            records.push(DonorRecord {
                index: i,
                seed,
                s,
                path: name,
            });
        }
        write_lines(&dir.join("manifest.jsonl"), &records)?;
        self.finish(&dir, "synth", &digest)?;
        Ok(out(false))
    }

    fn extractor(&self) -> Result<FeatureExtractor> {
        FeatureExtractor::new(self.cfg.extractor.clone())
    }

    fn afs_digest(
        &self,
        ex: &FeatureExtractor,
        normals_digest: &str,
        donor_digest: &str,
    ) -> String {
        let c = &self.cfg;
        digest_parts(&[
            b"afs",
            normals_digest.as_bytes(),
            donor_digest.as_bytes(),
            ex.id().as_bytes(),
            &json(&c.blend),
            &json(&c.afs),
            &c.seed.to_le_bytes(),
        ])
    }

    fn afs_path(&self, g: &Group, digest: &str) -> PathBuf {
        self.group_dir(g)
            .join(format!("afs-{}.json", short(digest)))
    }

    /// Ranks feature channels against synthetic anomaly masks and caches
    /// the selection.
    pub fn afs(&self) -> Result<Vec<(StageOutput, AfsIndexCache)>> {
        self.groups()?.iter().map(|g| self.afs_group(g)).collect()
    }

    fn afs_group(&self, g: &Group) -> Result<(StageOutput, AfsIndexCache)> {
        let (normals, nd) = self.normals(g)?;
        let (donor_dir, donor_digest) = self.donor_source(g, &nd)?;
        let ex = self.extractor()?;
        let digest = self.afs_digest(&ex, &nd, &donor_digest);
        let path = self.afs_path(g, &digest);
        std::fs::create_dir_all(self.group_dir(g)).at(self.group_dir(g))?;
        let a = &self.cfg.afs;
        let (cache, hit) = afs_select_cached(&path, ex.id(), &digest, &a.m, || {
            let size = self.cfg.data.image_size;
            let donors = load_donors(&donor_dir, size, size)?;
            let stream = SynthStream::new(
                &normals,
                &donors,
                &self.cfg.blend,
                Rng::new(self.cfg.seed).split(KEY_AFS).next_u64(),
            )?
            .anomalies_only();
            let channels: Vec<usize> = match &self.cfg.extractor {
                ExtractorConfig::BuiltinPyramid { widths, .. } => widths.clone(),
                ExtractorConfig::FileIngest { .. } => unreachable!("rejected in Pipeline::new"),
            };
            let mut acc = AfsAccumulator::new(&channels, a.norm);
            let mut start = 0;
            while start < a.samples {
                let end = (start + a.batch).min(a.samples);
                let samples = (start..end)
                    .map(|i| stream.sample(i))
                    .collect::<Result<Vec<_>>>()?;
                let imgs_a: Vec<Tensor<f32>> = samples.iter().map(|s| s.a.clone()).collect();
                let imgs_i: Vec<Tensor<f32>> = samples.iter().map(|s| s.i.clone()).collect();
                let masks: Vec<Tensor<f32>> = samples.iter().map(|s| s.m.clone()).collect();
                let fa = ex.extract_batch(&Tensor::stack(&imgs_a)?)?;
                let fi = ex.extract_batch(&Tensor::stack(&imgs_i)?)?;
                acc.add_batch(&fa, &fi, &Tensor::stack(&masks)?)?;
                start = end;
            }
            acc.losses()
        })?;
        Ok((
            StageOutput {
                group: g.name.clone(),
                digest,
                path,
                cached: hit,
            },
            cache,
        ))
    }

    fn train_digest(&self, afs_digest: &str) -> String {
        let c = &self.cfg;
        digest_parts(&[
            b"train",
            afs_digest.as_bytes(),
            &json(&c.model),
            &json(&c.train),
            &json(&c.blend),
            &c.seed.to_le_bytes(),
        ])
    }

    /// Everything downstream of AFS needs its cache and digest.
    fn afs_artifact(
        &self,
        g: &Group,
        nd: &str,
        ex: &FeatureExtractor,
    ) -> Result<(AfsIndexCache, String, PathBuf)> {
        let (donor_dir, donor_digest) = self.donor_source(g, nd)?;
        let digest = self.afs_digest(ex, nd, &donor_digest);
        let path = self.afs_path(g, &digest);
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
        let cache = AfsIndexCache::load_for(&path, ex.id())?;
        if cache.afs_sample_digest != digest {
            return Err(Error::Provenance(format!(
                "{} was computed for a different sample set",
                path.display()
            )));
        }
        Ok((cache, digest, donor_dir))
    }

    fn selected(
        ex: &FeatureExtractor,
        cache: &AfsIndexCache,
        images: &[Tensor<f32>],
    ) -> Result<Vec<Tensor<f32>>> {
        let feats = ex.extract_batch(&Tensor::stack(images)?)?;
        feats
            .iter()
            .zip(&cache.layers)
            .map(|(f, sel)| select_batch(f, &sel.indices))
            .collect()
    }

    /// Jointly trains reconstructors and discriminator on a 1:1 stream of
    /// normal and synthetic anomalous images.
    pub fn train(&self) -> Result<Vec<StageOutput>> {
        self.groups()?.iter().map(|g| self.train_group(g)).collect()
    }

    fn train_dir(&self, g: &Group, digest: &str) -> PathBuf {
        self.group_dir(g).join(format!("train-{}", short(digest)))
    }

    fn train_group(&self, g: &Group) -> Result<StageOutput> {
        let (normals, nd) = self.normals(g)?;
        let ex = self.extractor()?;
        let (cache, afs_digest, donor_dir) = self.afs_artifact(g, &nd, &ex)?;
        let digest = self.train_digest(&afs_digest);
        let dir = self.train_dir(g, &digest);
        let out = |cached| StageOutput {
            group: g.name.clone(),
            digest: digest.clone(),
            path: dir.join(MODEL_FILE),
            cached,
        };
        if Self::is_done(&dir, &digest) {
            return Ok(out(true));
        }
        std::fs::create_dir_all(&dir).at(&dir)?;
        let size = self.cfg.data.image_size;
        let donors = load_donors(&donor_dir, size, size)?;
        let root = Rng::new(self.cfg.seed);
        let stream = SynthStream::new(
            &normals,
            &donors,
            &self.cfg.blend,
            root.split(KEY_TRAIN_DATA).next_u64(),
        )?;
        let mut model = DetectionModel::new(
            &cache.m(),
            &self.cfg.model,
            (size, size),
            root.split(KEY_TRAIN_INIT).next_u64(),
        )?;
        let mut adam = Adam::new(AdamConfig {
            lr: self.cfg.train.lr,
            ..AdamConfig::default()
        });
        let b = self.cfg.train.batch;
        let mut log: Vec<StepRecord> = Vec::with_capacity(self.cfg.train.steps);
        for step in 0..self.cfg.train.steps {
            let samples = (step * b..(step + 1) * b)
                .map(|i| stream.sample(i))
                .collect::<Result<Vec<_>>>()?;
            let a: Vec<Tensor<f32>> = samples.iter().map(|s| s.a.clone()).collect();
            let i: Vec<Tensor<f32>> = samples.iter().map(|s| s.i.clone()).collect();
            let m: Vec<Tensor<f32>> = samples.iter().map(|s| s.m.clone()).collect();
            let batch = TrainBatch {
                features_a: Self::selected(&ex, &cache, &a)?,
                features_i: Self::selected(&ex, &cache, &i)?,
                masks: Tensor::stack(&m)?,
            };
            let metrics = model.train_step(&mut adam, &batch)?;
            if step % 50 == 0 || step + 1 == self.cfg.train.steps {
                log::info!(
                    "train {} step {step}: recon {:.4} seg {:.4}",
                    g.name,
                    metrics.recon,
                    metrics.seg
                );
            }
            log.push(StepRecord { step, metrics });
        }
        model.to_checkpoint()?.save(dir.join(MODEL_FILE))?;
        write_lines(&dir.join("losses.jsonl"), &log)?;
        self.finish(&dir, "train", &digest)?;
        Ok(out(false))
    }

    /// Loads the trained detector of a group.
    pub fn load_model(&self, g: &Group) -> Result<(DetectionModel, AfsIndexCache, String)> {
        let (_, nd) = self.normals(g)?;
        let ex = self.extractor()?;
        let (cache, afs_digest, _) = self.afs_artifact(g, &nd, &ex)?;
        let digest = self.train_digest(&afs_digest);
        let dir = self.train_dir(g, &digest);
        if !Self::is_done(&dir, &digest) {
            return Err(Error::MissingArtifact(dir.join(MODEL_FILE)));
        }
        let ckpt = ParamSet::load(dir.join(MODEL_FILE))?;
        let size = self.cfg.data.image_size;
        let model =
            DetectionModel::from_checkpoint(&cache.m(), &self.cfg.model, (size, size), &ckpt)?;
        Ok((model, cache, digest))
    }

    /// Scores every test image, exports maps, and writes the report to
    /// `<work_dir>/report.json` and `report.txt`.
    pub fn eval(&self) -> Result<EvalReport> {
        let size = self.cfg.data.image_size;
        let ex = self.extractor()?;
        let mut scored = Vec::new();
        for g in self.groups()? {
            let (model, cache, train_digest) = self.load_model(&g)?;
            let out_dir = self
                .group_dir(&g)
                .join(format!("eval-{}", short(&train_digest)));
            for cat in &g.categories {
                let items = dataset::test_items(&self.cfg.paths.dataset, cat)?;
                let chunks: Vec<&[TestItem]> = items.chunks(self.cfg.eval.batch).collect();
                let results: Vec<Vec<(Tensor<f32>, ScoredImage)>> = self.pool.install(|| {
                    chunks
                        .par_iter()
                        .map(|chunk| self.score_chunk(&model, &ex, &cache, chunk, size))
                        .collect::<Result<Vec<_>>>()
                })?;
                for (item, (image, s)) in items.iter().zip(results.into_iter().flatten()) {
                    if self.cfg.eval.export_maps {
                        let d = out_dir.join("maps").join(cat).join(&item.defect);
                        std::fs::create_dir_all(&d).at(&d)?;
                        image_io::save_pgm16(&d.join(format!("{}.pgm", item.stem)), &s.pixels)?;
                        image_io::save_heat_overlay(
                            &d.join(format!("{}_overlay.png", item.stem)),
                            &image,
                            &s.pixels,
                        )?;
                    }
                    scored.push(s);
                }
            }
        }
        let report = evaluate(&scored, self.cfg.eval.fpr_limit, &self.config_digest)?;
        let work = &self.cfg.paths.work_dir;
        std::fs::create_dir_all(work).at(work)?;
        atomic_write(work.join("report.json"), report.to_json()?.as_bytes())?;
        atomic_write(work.join("report.txt"), report.to_table().as_bytes())?;
        Ok(report)
    }

    fn score_chunk(
        &self,
        model: &DetectionModel,
        ex: &FeatureExtractor,
        cache: &AfsIndexCache,
        chunk: &[TestItem],
        size: usize,
    ) -> Result<Vec<(Tensor<f32>, ScoredImage)>> {
        let loaded = chunk
            .iter()
            .map(|it| dataset::load_test(it, size))
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<Tensor<f32>> = loaded.iter().map(|(i, _)| i.clone()).collect();
        let maps = model.score(&Self::selected(ex, cache, &images)?)?;
        Ok(chunk
            .iter()
            .zip(loaded)
            .zip(maps)
            .map(|((it, (image, mask)), map)| {
                let s = ScoredImage {
                    category: it.category.clone(),
                    pixels: map.pixels,
                    image_score: map.image_score,
                    mask,
                    anomalous: it.anomalous(),
                };
                (image, s)
            })
            .collect())
    }

    /// All stages in order; completed stages are reused.
    pub fn run_all(&self) -> Result<EvalReport> {
        if self.cfg.synth.donor_dir.is_none() {
            self.train_diffusion()?;
        }
        self.synth()?;
        self.afs()?;
        self.train()?;
        self.eval()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub metrics: StepMetrics,
}
