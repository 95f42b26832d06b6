//! Pipeline CLI: corpus generation, calibration, transfer training,
//! synthesis, detector training, detection, stitching, evaluation and the
//! desk-scale comparison run.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vipastain::config::PipelineConfig;
use vipastain::detect::{load_detections, save_detections, DetectorMode, DetectorModel};
use vipastain::error::Error;
use vipastain::imgutil::{load_rgb, save_rgb, BBox, StainDomain};
use vipastain::manifest::{load_annotations, DatasetManifest};
use vipastain::maskextract::DomainThresholds;
use vipastain::patchio::{stitch_patches, tile_image, GridPatchRef};
use vipastain::pipeline;
use vipastain::transfer::{Direction, TranslatorBundle};

#[derive(Parser)]
#[command(
    name = "vipastain",
    about = "Mask-guided virtual staining (H&E <-> CD20) and TLS detection pipeline",
    version
)]
struct Cli {
    /// Pipeline config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a pseudo-histology corpus with exact ground truth.
    GenCorpus {
        #[arg(long, value_parser = ["he", "cd20", "both"])]
        stain: String,
        #[arg(long)]
        count: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate frozen multi-Otsu thresholds for a stain domain.
    Calibrate {
        #[arg(long, value_parser = ["he", "cd20"])]
        stain: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mask-guided translation bundle.
    TrainTransfer {
        #[arg(long)]
        he: PathBuf,
        #[arg(long)]
        cd20: PathBuf,
        #[arg(long)]
        thresholds_he: PathBuf,
        #[arg(long)]
        thresholds_cd20: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured mask weight (e.g. 0 for the ablation).
        #[arg(long)]
        lambda_mask: Option<f64>,
    },
    /// Translate patches with a trained checkpoint.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["a2b", "b2a"])]
        direction: String,
        /// Manifest of input patches.
        #[arg(long, name = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a TLS detector (single stain or six-channel fused).
    TrainDetector {
        #[arg(long, value_parser = ["he", "cd20", "fused"])]
        mode: String,
        #[arg(long)]
        he: PathBuf,
        /// Virtual CD20 manifest (required for cd20/fused modes).
        #[arg(long)]
        virtual_cd20: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a detector over a manifest, writing detections as JSON lines.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        virtual_cd20: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split one image into coordinate-addressed patches.
    Tile {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        slide_id: String,
        #[arg(long)]
        overlap: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reassemble `{slide}_x*_y*.png` patches into a mosaic.
    Stitch {
        /// Directory of patch files following the naming convention.
        #[arg(long, name = "in")]
        input: PathBuf,
        #[arg(long, value_parser = parse_dims)]
        target_dims: (u32, u32),
        #[arg(long)]
        out: PathBuf,
    },
    /// Box/mask precision, recall and F1 of detections against annotations.
    Evaluate {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        /// Manifest providing ground-truth TLS masks (optional).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fréchet distance between two directories of images.
    Fid {
        #[arg(long)]
        set_a: PathBuf,
        #[arg(long)]
        set_b: PathBuf,
    },
    /// One-command desk-scale reproduction of the staining/detection
    /// comparison (both fusion strategies and the unguided ablation).
    ReproDesk {
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: a fresh run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_dims(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    Ok((
        w.parse().map_err(|e| format!("bad width: {e}"))?,
        h.parse().map_err(|e| format!("bad height: {e}"))?,
    ))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig, Error> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::GenCorpus { stain, count, out } => {
            let domains: Vec<StainDomain> = match stain.as_str() {
                "he" => vec![StainDomain::He],
                "cd20" => vec![StainDomain::Cd20],
                _ => vec![StainDomain::He, StainDomain::Cd20],
            };
            for d in domains {
                let m = pipeline::gen_corpus(&cfg, d, count, &out)?;
                log::info!("wrote {} {} patches under {}", m.len(), d.as_str(), out.display());
            }
            cfg.save_resolved(&out.join("config.resolved"))?;
            Ok(())
        }
        Command::Calibrate { stain, manifest, out } => {
            let domain = StainDomain::parse(&stain)?;
            let m = DatasetManifest::load(&manifest)?;
            let ths = pipeline::calibrate(&cfg, &m, domain)?;
            ths.save(&out)?;
            for ts in &ths.sets {
                log::info!(
                    "{} {:?}: thresholds {:?}, working {}",
                    stain,
                    ts.channel,
                    ts.thresholds,
                    ts.working_threshold()
                );
            }
            Ok(())
        }
        Command::TrainTransfer {
            he,
            cd20,
            thresholds_he,
            thresholds_cd20,
            out,
            lambda_mask,
        } => {
            let he_m = DatasetManifest::load(&he)?;
            let cd_m = DatasetManifest::load(&cd20)?;
            let th_he = DomainThresholds::load(&thresholds_he)?;
            let th_cd = DomainThresholds::load(&thresholds_cd20)?;
            let lambda = lambda_mask.unwrap_or(cfg.transfer.lambda_mask);
            let tcfg = pipeline::transfer_config(&cfg, lambda, cfg.run.seed);
            let mut bundle = TranslatorBundle::new(tcfg, th_he, th_cd)?;
            let csv = out.with_extension("loss.csv");
            vipastain::transfer::train(&mut bundle, &he_m, &cd_m, &out, &csv)?;
            log::info!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Synthesize {
            checkpoint,
            direction,
            input,
            out,
        } => {
            let bundle = TranslatorBundle::load_checkpoint(&checkpoint)?;
            let dir = Direction::parse(&direction)?;
            let m = DatasetManifest::load(&input)?;
            if dir == Direction::AToB {
                let vm = pipeline::synthesize_manifest(&bundle, &m, &out)?;
                log::info!("synthesized {} virtual CD20 patches", vm.len());
            } else {
                std::fs::create_dir_all(out.join("images"))
                    .map_err(|e| Error::io(&out, e))?;
                for row in &m.rows {
                    let img = load_rgb(&row.image_path)?;
                    let v = bundle.synthesize(&[img], dir).pop().unwrap();
                    save_rgb(&v, &out.join("images").join(format!("{}.png", row.patch_id)))?;
                }
                log::info!("synthesized {} virtual H&E patches", m.len());
            }
            Ok(())
        }
        Command::TrainDetector {
            mode,
            he,
            virtual_cd20,
            seed,
            out,
        } => {
            let mode = DetectorMode::parse(&mode)?;
            let he_m = DatasetManifest::load(&he)?;
            let virt = match &virtual_cd20 {
                Some(p) => DatasetManifest::load(p)?,
                None => DatasetManifest::default(),
            };
            if mode != DetectorMode::He && virt.is_empty() {
                return Err(Error::InvalidArgument(
                    "--virtual-cd20 manifest required for cd20/fused modes".into(),
                ));
            }
            let seed = seed.unwrap_or(cfg.run.seed);
            let curve = out.with_extension("curve.csv");
            let model =
                pipeline::train_detector(&cfg, mode, seed, &he_m, &virt, Some(&curve))?;
            model.save(&out)?;
            log::info!("detector written to {}", out.display());
            Ok(())
        }
        Command::Detect {
            model,
            manifest,
            virtual_cd20,
            out,
        } => {
            let model = DetectorModel::load(&model)?;
            let he_m = DatasetManifest::load(&manifest)?;
            let virt = match &virtual_cd20 {
                Some(p) => DatasetManifest::load(p)?,
                None => DatasetManifest::default(),
            };
            let dets = pipeline::detect_manifest(&cfg, &model, &he_m, &virt)?;
            save_detections(&out, &dets)?;
            log::info!("{} detections written to {}", dets.len(), out.display());
            Ok(())
        }
        Command::Tile {
            image,
            slide_id,
            overlap,
            out,
        } => {
            let img = load_rgb(&image)?;
            let tiles = tile_image(
                &slide_id,
                &img,
                cfg.run.patch_size,
                overlap.unwrap_or(0),
            )?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (r, t) in &tiles {
                save_rgb(t, &out.join(format!("{}.png", r.patch_id())))?;
            }
            log::info!("wrote {} tiles to {}", tiles.len(), out.display());
            Ok(())
        }
        Command::Stitch {
            input,
            target_dims,
            out,
        } => {
            let mut refs = Vec::new();
            let entries =
                std::fs::read_dir(&input).map_err(|e| Error::io(&input, e))?;
            let mut paths: Vec<PathBuf> =
                entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths {
                let Some(stem) = p.file_stem().and_then(|s| s.to_str()) else {
                    continue;
                };
                let Some((slide, ox, oy)) = parse_patch_name(stem) else {
                    continue;
                };
                let img = load_rgb(&p)?;
                let size = img.width();
                refs.push((
                    GridPatchRef {
                        slide_id: slide.to_string(),
                        grid_x: ox / size.max(1),
                        grid_y: oy / size.max(1),
                        origin_x: ox,
                        origin_y: oy,
                        size,
                        path: Some(p.clone()),
                    },
                    img,
                ));
            }
            if refs.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no {{slide}}_x*_y*.png patches found in {}",
                    input.display()
                )));
            }
            let mosaic = stitch_patches(&refs, target_dims)?;
            save_rgb(&mosaic, &out)?;
            log::info!("stitched {} patches into {}", refs.len(), out.display());
            Ok(())
        }
        Command::Evaluate {
            dets,
            gt,
            iou,
            manifest,
            out,
        } => {
            let dets = load_detections(&dets)?;
            let anns = load_annotations(&gt)?;
            let mut gts: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
            for a in anns {
                gts.insert(
                    a.patch_id.clone(),
                    a.boxes.iter().map(|&b| BBox::from_array(b)).collect(),
                );
            }
            let gt_masks = match &manifest {
                Some(p) => {
                    let m = DatasetManifest::load(p)?;
                    let mut masks = BTreeMap::new();
                    for row in &m.rows {
                        if let Some(mp) = row
                            .mask_paths
                            .iter()
                            .find(|mp| mp.to_string_lossy().ends_with("_gt_tls.png"))
                        {
                            masks.insert(
                                row.patch_id.clone(),
                                vipastain::imgutil::Mask::load(mp)?,
                            );
                        }
                    }
                    Some(masks)
                }
                None => None,
            };
            let report = pipeline::evaluate_detections(
                &dets,
                &gts,
                gt_masks.as_ref(),
                iou.unwrap_or(cfg.evaluate.match_iou),
                cfg.run.patch_size,
            )?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Config(e.to_string()))?;
            match out {
                Some(p) => std::fs::write(&p, &json).map_err(|e| Error::io(&p, e))?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Fid { set_a, set_b } => {
            let load_dir = |dir: &PathBuf| -> Result<Vec<image::RgbImage>, Error> {
                let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| Error::io(dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "png"))
                    .collect();
                paths.sort();
                paths.iter().map(|p| load_rgb(p)).collect()
            };
            let a = load_dir(&set_a)?;
            let b = load_dir(&set_b)?;
            let fa = pipeline::feature_set_of(&cfg, &a)?;
            let fb = pipeline::feature_set_of(&cfg, &b)?;
            let d = vipastain::evalmetrics::frechet_distance(&fa, &fb)?;
            println!("{{\"fid\": {d}}}");
            Ok(())
        }
        Command::ReproDesk { seed, out } => {
            let mut cfg = cfg;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            let out_dir = match out {
                Some(p) => {
                    std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
                    p
                }
                None => pipeline::new_run_dir(&cfg)?,
            };
            let report = pipeline::repro_desk(&cfg, &out_dir)?;
            println!("{}", report.to_table());
            log::info!("full report under {}", out_dir.join("reports").display());
            Ok(())
        }
    }
}

/// Parse `{slide}_x{ox}_y{oy}` patch file stems.
fn parse_patch_name(stem: &str) -> Option<(&str, u32, u32)> {
    let xpos = stem.rfind("_x")?;
    let rest = &stem[xpos + 2..];
    let ypos = rest.find("_y")?;
    let ox: u32 = rest[..ypos].parse().ok()?;
    let oy: u32 = rest[ypos + 2..].parse().ok()?;
    Some((&stem[..xpos], ox, oy))
}
