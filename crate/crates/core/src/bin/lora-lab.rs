fn main() {
    std::process::exit(lora_lab::harness::cli::run(std::env::args_os()));
}
