fn main() {
    std::process::exit(lowlight::run());
}
