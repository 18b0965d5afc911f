use anyhow::Context;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    fedelc::cli::run(std::env::args_os()).context("fedelc run failed")
}
