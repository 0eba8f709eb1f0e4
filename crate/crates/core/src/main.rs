fn main() {
    std::process::exit(seqmask::cli::run(std::env::args_os()));
}
