use clap::Parser;

fn main() {
    let cli = aikd_cli::Cli::parse();
    match aikd_cli::run(&cli) {
        Ok(out) => println!("{out}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(aikd_cli::exit_code(&e));
        }
    }
}
