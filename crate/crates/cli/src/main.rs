fn main() {
    std::process::exit(chaos_forecast_cli::run(std::env::args_os()));
}
