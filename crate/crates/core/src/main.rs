fn main() {
    std::process::exit(bilinear_ae::cli::run());
}
