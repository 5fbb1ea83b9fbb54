fn main() {
    std::process::exit(diffsynth::run(std::env::args_os()));
}
