use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wufilter::pipeline::{self, Config};
use wufilter::Result;

#[derive(Parser)]
#[command(name = "wufilter", version, about = "Block-DCT image codec with a fine-tuned post-filter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic PPM test images.
    Corpus {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Pre-train the filter on a directory of PPM images.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: PathBuf,
    },
    /// Code images, fine-tune the filter and write a bundle.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Decode and filter a bundle into a directory of PPM images.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Write the rate and PSNR table for a bundle against its originals.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Write the update compression sweep table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Corpus { common, count, size } => {
            let cfg = common.config()?;
            pipeline::cmd_corpus(&common.out, count, size, cfg.seed)?;
            println!("wrote {count} images to {}", common.out.display());
        }
        Command::Pretrain { common, images } => {
            let r = pipeline::cmd_pretrain(&common.config()?, &images, &common.out)?;
            println!("pretrain mse {:.6e} -> {:.6e}", r.initial_mse, r.final_mse);
        }
        Command::Encode { common, images, weights } => {
            let o = pipeline::cmd_encode(&common.config()?, &images, &weights, &common.out)?;
            let r = &o.report;
            println!(
                "{} bytes, {:.4} bpp (update {:.4}), psnr codec {:.3} pretrained {:.3} finetuned {:.3}",
                o.bundle_bytes.len(),
                r.total_bpp(),
                r.update_bpp(),
                r.mean_psnr_codec(),
                r.mean_psnr_pretrained(),
                r.mean_psnr_finetuned()
            );
        }
        Command::Decode { common, bundle, weights } => {
            common.config()?;
            let images = pipeline::cmd_decode(&bundle, &weights, &common.out)?;
            println!("wrote {} images to {}", images.len(), common.out.display());
        }
        Command::Evaluate { common, images, bundle, weights } => {
            common.config()?;
            let r = pipeline::cmd_evaluate(&images, &bundle, &weights, &common.out)?;
            println!("{:.4} bpp, psnr finetuned {:.3}", r.total_bpp(), r.mean_psnr_finetuned());
        }
        Command::Sweep { common, images, weights } => {
            let s = pipeline::cmd_sweep(&common.config()?, &images, &weights, &common.out)?;
            match s.selected {
                Some(c) => println!("selected tau {} k {} ({} bytes)", c.tau, c.k, c.bytes),
                None => println!("no candidate fits the update budget"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
